// Temporary diagnostic; not part of the suite.
use grounder::checkpoint;
use grounder::config::ModelConfig;
use grounder::data::{generate_sample, GenConfig, Vocab};
use grounder::model::Model;

#[test]
#[ignore]
fn probe_variance() {
    let cfg = ModelConfig::toy();
    let (model, _opt) = checkpoint::load(std::path::Path::new("/tmp/long1/best.ckpt")).unwrap();
    let vocab = Vocab::standard();
    let gen = GenConfig { canvas_size: cfg.image_size, ..GenConfig::default() };
    let n = 40;
    let mut boxes = Vec::new();
    let mut regs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let s = generate_sample(900_000 + i, &gen, &vocab, cfg.max_text_len).unwrap();
        let fwd = model.forward(&s.image, &s.word_ids).unwrap();
        boxes.push(fwd.predicted_box());
        regs.push(fwd.tape.value(fwd.reg_final).data.clone());
    }
    let dim = regs[0].len();
    let mut mean = vec![0.0; dim];
    for r in &regs { for (m, v) in mean.iter_mut().zip(r) { *m += v / n as f64; } }
    let mut var = 0.0;
    let mut nrm = 0.0;
    for r in &regs {
        for (m, v) in mean.iter_mut().zip(r) { var += (v - *m) * (v - *m); nrm += v * v; }
    }
    println!("reg_final: rel std across samples = {:.6}", (var / nrm).sqrt());
    let (mut mcx, mut mcy, mut mw, mut mh) = (0.0, 0.0, 0.0, 0.0);
    for b in &boxes { mcx += b.cx; mcy += b.cy; mw += b.w; mh += b.h; }
    let k = n as f64;
    mcx /= k; mcy /= k; mw /= k; mh /= k;
    let mut scx = 0.0f64;
    let mut scy = 0.0f64;
    for b in &boxes { scx += (b.cx - mcx).powi(2); scy += (b.cy - mcy).powi(2); }
    println!(
        "pred box: mean=({:.3},{:.3},{:.3},{:.3}) std cx={:.4} cy={:.4}",
        mcx, mcy, mw, mh, (scx / k).sqrt(), (scy / k).sqrt()
    );
}
