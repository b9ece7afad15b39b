//! Central differences against reverse-mode gradients for the adapter
//! parameters on one root-to-leaf path.

use hieradapt::adapters::AdapterHook;
use hieradapt::domtree::{build_manual_tree, Grouping};
use hieradapt::lm::{pretrain, LmConfig, PretrainConfig, Vocab};
use hieradapt::numcore::finite_diff_check_multi;
use hieradapt::synth::{planted_corpora, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> hieradapt::Result<()> {
    let lm = LmConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        context_len: 16,
        vocab_size: Vocab::SIZE,
    };
    // the output head starts at zero; a few steps give it something to pass back
    let corpora = planted_corpora(&SynthConfig {
        docs_per_domain: 20,
        ..SynthConfig::default()
    })?;
    let pcfg = PretrainConfig {
        steps: 20,
        seq_len: 12,
        ..PretrainConfig::default()
    };
    let backbone = pretrain(&corpora, lm, &pcfg)?.backbone;
    let tree = build_manual_tree(&Grouping::parse("((x, y), z)")?)?;
    let mut store = tree.attach_adapters(backbone.config(), 4, 0)?;

    // move away from the zero initialisation so every factor matters
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.3).unwrap();
    for i in 0..store.params().len() {
        store.params_mut().get_mut(i).data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let path = tree.path_for_domain("x")?;
    let idxs: Vec<usize> = path.iter().flat_map(|&n| store.node_tensor_indices(n)).collect();
    let params: Vec<_> = idxs.iter().map(|&i| store.params().get(i).clone()).collect();
    let coords: Vec<(usize, usize)> = (0..20)
        .map(|_| {
            let t = rng.random_range(0..params.len());
            (t, rng.random_range(0..params[t].numel()))
        })
        .collect();
    let window: Vec<usize> = (0..13).map(|_| rng.random_range(0..Vocab::SIZE)).collect();

    let err = finite_diff_check_multi(
        |tape, vars| {
            let bvars = backbone.bind(tape, false);
            let mut hook = AdapterHook::single(&store, path.clone(), false)?;
            for (j, &i) in idxs.iter().enumerate() {
                hook.preset(i, vars[j]);
            }
            backbone.window_loss(tape, &bvars, &window, Some(&mut hook))
        },
        &params,
        1e-5,
        &coords,
    )?;
    println!("worst relative error over {} coordinates: {err:.2e}", coords.len());
    Ok(())
}
