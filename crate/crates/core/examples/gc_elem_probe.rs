use crossalign_core::autodiff::Tape;
use crossalign_core::corpus::generate_corpus;
use crossalign_core::gradcheck::tiny_configs;
use crossalign_core::model::*;

fn main() {
    let (ccfg, mcfg) = tiny_configs();
    let corpus = generate_corpus(&ccfg).unwrap();
    let refs: Vec<&crossalign_core::corpus::PairedSample> = corpus.iter().collect();
    let batch = make_batch(&refs, &ccfg).unwrap();
    let params = ModelParams::init(&mcfg, &ccfg, 2024).unwrap();

    let (frozen, ad) = {
        let t = Tape::new();
        let pv = ParamVars::create(&t, &params);
        let feats = forward_features(&t, &pv, &batch, &mcfg, &ccfg).unwrap();
        let out = forward_losses(&t, &pv, &feats, &batch, &mcfg, &ccfg, 2024, 0, Objective::Full, None).unwrap();
        let grads = t.backward(out.vars.total);
        let g = grads.get(pv.xattn_image.q).unwrap().iter().nth(32).copied().unwrap();
        (out.frozen, g)
    };
    let eval = |params: &ModelParams| -> f64 {
        let t = Tape::new();
        let pv = ParamVars::create(&t, params);
        let feats = forward_features(&t, &pv, &batch, &mcfg, &ccfg).unwrap();
        let out = forward_losses(&t, &pv, &feats, &batch, &mcfg, &ccfg, 2024, 0, Objective::Full, Some(&frozen)).unwrap();
        t.scalar(out.vars.total)
    };
    println!("ad = {ad:.15e}");
    for h in [1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10] {
        let mut plus = params.clone();
        {
            let mut n = plus.named_mut();
            let slot = n.iter_mut().find(|(name, _)| name == "xattn_image.q").unwrap();
            slot.1.as_slice_mut().unwrap()[32] += h;
        }
        let mut minus = params.clone();
        {
            let mut n = minus.named_mut();
            let slot = n.iter_mut().find(|(name, _)| name == "xattn_image.q").unwrap();
            slot.1.as_slice_mut().unwrap()[32] -= h;
        }
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        println!("h={h:.0e}: fd={fd:.15e} rel={rel:.3e}");
    }
}
