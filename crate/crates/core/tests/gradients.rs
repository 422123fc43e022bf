mod common;

use common::*;
use idpatch::model::IdPatchModel;
use idpatch::nn::ParamId;

fn ids_with_prefix(store: &idpatch::nn::ParamStore<f64>, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect()
}

#[test]
fn projector_gradients_match_finite_differences() {
    let (model, mut store) = IdPatchModel::build::<f64>(&tiny_model(), 4).unwrap();
    let ids = ids_with_prefix(&store, "projector.");
    let probes = finite_difference_probes(&mut store, &ids, |s, g| projector_loss(&model, s, g), 12, 1e-3, 1);
    assert_eq!(probes.len(), 12);
    for p in &probes {
        assert!(p.rel_error() < 1e-3, "{p:?}");
    }
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let (model, mut store) = IdPatchModel::build::<f64>(&tiny_model(), 5).unwrap();
    randomize_zero_convs(&model, &mut store, 6);
    for (prefix, seed) in [("unet.", 2), ("control.", 3), ("text.", 4)] {
        let ids = ids_with_prefix(&store, prefix);
        let probes = finite_difference_probes(&mut store, &ids, |s, g| denoiser_loss(&model, s, g), 6, 1e-3, seed);
        assert_eq!(probes.len(), 6, "{prefix}");
        for p in &probes {
            assert!(p.rel_error() < 1e-3, "{p:?}");
        }
    }
}

#[test]
fn projector_receives_gradient_through_the_denoiser() {
    let (model, mut store) = IdPatchModel::build::<f64>(&tiny_model(), 7).unwrap();
    randomize_zero_convs(&model, &mut store, 8);
    let ids = ids_with_prefix(&store, "projector.");
    let probes = finite_difference_probes(&mut store, &ids, |s, g| denoiser_loss(&model, s, g), 5, 1e-3, 9);
    assert_eq!(probes.len(), 5);
    for p in &probes {
        assert!(p.rel_error() < 1e-3, "{p:?}");
    }
}
