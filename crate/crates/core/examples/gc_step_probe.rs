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

    // autodiff grad of recon loss wrt dec.2.b[0]
    let (frozen, ad) = {
        let t = Tape::new();
        let pv = ParamVars::create(&t, &params);
        let feats = forward_features(&t, &pv, &batch, &mcfg, &ccfg).unwrap();
        let out = forward_losses(&t, &pv, &feats, &batch, &mcfg, &ccfg, 2024, 0, Objective::Full, None).unwrap();
        let grads = t.backward(out.vars.re.unwrap());
        let g = grads.get(pv.dec_stages[2].1).unwrap().iter().next().copied().unwrap();
        (out.frozen, g)
    };
    let eval = |params: &ModelParams| -> f64 {
        let t = Tape::new();
        let pv = ParamVars::create(&t, params);
        let feats = forward_features(&t, &pv, &batch, &mcfg, &ccfg).unwrap();
        let out = forward_losses(&t, &pv, &feats, &batch, &mcfg, &ccfg, 2024, 0, Objective::Full, Some(&frozen)).unwrap();
        t.scalar(out.vars.re.unwrap())
    };
    for h in [1e-5, 1e-6, 1e-7, 1e-8] {
        let mut plus = params.clone();
        plus.dec_stages[2].b[[0]] += h;
        let mut minus = params.clone();
        minus.dec_stages[2].b[[0]] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        println!("h={h:.0e}: ad={ad:.12e} fd={fd:.12e} rel={rel:.3e}");
    }
}
