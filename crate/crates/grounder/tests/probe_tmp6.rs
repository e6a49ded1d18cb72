// Temporary diagnostic; not part of the suite.
use grounder::boxes::{iou, BoundingBox};
use grounder::config::ModelConfig;
use grounder::data::{make_split, GenConfig, Vocab};
use grounder::model::{giou_var, Model};
use grounder::params::{ParamGroup, ParamStore};
use grounder::tape::Tape;
use grounder::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_mlp_head_ceiling() {
    let depth: usize = std::env::var("PROBE_DEPTH").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let patch: usize = std::env::var("PROBE_PATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 32;
    cfg.patch_size = patch;
    cfg.vision_depth = depth;
    cfg.vision_dim = std::env::var("PROBE_VDIM").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
    cfg.bottleneck_dim = 16;
    cfg.cia_layers = if depth >= 2 { vec![depth - 2, depth - 1] } else { vec![0] };
    cfg.dosa_layers = vec![0, 1];
    let gen = if std::env::var("PROBE_REAL").is_ok() {
        GenConfig { canvas_size: cfg.image_size, ..GenConfig::default() }
    } else {
        GenConfig {
            canvas_size: cfg.image_size,
            min_objects: 1,
            max_objects: 1,
            ambiguity_bias: 0.0,
            ..GenConfig::default()
        }
    };
    let vocab = Vocab::standard();
    let split = make_split(&gen, 2000, 300, 5, &vocab, cfg.max_text_len).unwrap();
    let model = Model::new(cfg.clone(), cfg.seed);
    let feats = |samples: &[grounder::data::Sample]| -> Vec<Tensor> {
        samples
            .iter()
            .map(|s| {
                let fwd = model.forward(&s.image, &s.word_ids).unwrap();
                let mut f = fwd.tape.value(fwd.reg_final).data.clone();
                f.push(1.0);
                Tensor::row_vec(f)
            })
            .collect()
    };
    let mut xf = feats(&split.train);
    let mut xe = feats(&split.eval);
    // center by train mean (keep trailing 1.0 bias column intact)
    let d0 = xf[0].cols;
    let mut mu = vec![0.0; d0];
    for x in &xf { for (m, v) in mu.iter_mut().zip(&x.data) { *m += v / xf.len() as f64; } }
    mu[d0 - 1] = 0.0;
    if std::env::var("PROBE_NOCENTER").is_ok() { for m in mu.iter_mut() { *m = 0.0; } }
    for x in xf.iter_mut().chain(xe.iter_mut()) {
        for (v, m) in x.data.iter_mut().zip(&mu) { *v -= m; }
    }
    if std::env::var("PROBE_PLANT").is_ok() {
        for (x, s) in xf.iter_mut().zip(&split.train) {
            x.data[0] = s.gt_box.cx; x.data[1] = s.gt_box.cy;
            x.data[2] = s.gt_box.w; x.data[3] = s.gt_box.h;
        }
        for (x, s) in xe.iter_mut().zip(&split.eval) {
            x.data[0] = s.gt_box.cx; x.data[1] = s.gt_box.cy;
            x.data[2] = s.gt_box.w; x.data[3] = s.gt_box.h;
        }
    }
    let d = xf[0].cols;
    let hdim = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::default();
    let w1 = store.add("w1", Tensor::randn(d, hdim, (2.0 / d as f64).sqrt(), &mut rng), false, ParamGroup::Head, true);
    let b1 = store.add("b1", Tensor::zeros(1, hdim), false, ParamGroup::Head, false);
    let w2 = store.add("w2", Tensor::randn(hdim, 4, 0.01, &mut rng), false, ParamGroup::Head, true);
    let b2 = store.add("b2", Tensor::zeros(1, 4), false, ParamGroup::Head, false);
    let ids = [w1, b1, w2, b2];
    let mut m: Vec<Tensor> = ids.iter().map(|&i| { let t = store.value(i); Tensor::zeros(t.rows, t.cols) }).collect();
    let mut v = m.clone();
    let lr = 3e-3;
    let batch = 32;
    let mut step = 0u64;
    for epoch in 0..60 {
        let mut ep_loss = 0.0;
        let mut ep_cnt = 0.0;
        for (ci, chunk) in xf.chunks(batch).enumerate() {
            let mut grads = store.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for (k, x) in chunk.iter().enumerate() {
                let gt = &split.train[ci * batch + k].gt_box;
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let w1v = tape.param(&store, w1);
                let b1v = tape.param(&store, b1);
                let w2v = tape.param(&store, w2);
                let b2v = tape.param(&store, b2);
                let h = tape.matmul(xv, w1v);
                let h = tape.add_row(h, b1v);
                let h = tape.relu(h);
                let z = tape.matmul(h, w2v);
                let z = tape.add_row(z, b2v);
                let pred = tape.sigmoid(z);
                let gt_var = tape.input(Tensor::row_vec(vec![gt.cx, gt.cy, gt.w, gt.h]));
                let dxy = tape.sub(pred, gt_var);
                let adiff = tape.abs(dxy);
                let l1 = tape.mean(adiff);
                let g = giou_var(&mut tape, pred, gt_var);
                let one = tape.constant(1.0);
                let gl = tape.sub(one, g);
                let tot = tape.add(l1, gl);
                ep_loss += tape.scalar(tot);
                ep_cnt += 1.0;
                tape.backward(tot, scale, &mut grads);
            }
            step += 1;
            let t = step as f64;
            for (bi, &id) in ids.iter().enumerate() {
                let g = &grads[id];
                let mt = &mut m[bi];
                let vt = &mut v[bi];
                let p = store.value_mut(id);
                for i in 0..p.data.len() {
                    mt.data[i] = 0.9 * mt.data[i] + 0.1 * g.data[i];
                    vt.data[i] = 0.999 * vt.data[i] + 0.001 * g.data[i] * g.data[i];
                    let mh = mt.data[i] / (1.0 - 0.9f64.powf(t));
                    let vh = vt.data[i] / (1.0 - 0.999f64.powf(t));
                    p.data[i] -= lr * mh / (vh.sqrt() + 1e-8);
                }
            }
        }
        if epoch % 10 == 9 {
            println!("epoch {epoch}: train loss {:.4}", ep_loss / ep_cnt);
            let mut miou = 0.0;
            let mut p50 = 0.0;
            for (x, s) in xe.iter().zip(&split.eval) {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let w1v = tape.param(&store, w1);
                let b1v = tape.param(&store, b1);
                let w2v = tape.param(&store, w2);
                let b2v = tape.param(&store, b2);
                let h = tape.matmul(xv, w1v);
                let h = tape.add_row(h, b1v);
                let h = tape.relu(h);
                let z = tape.matmul(h, w2v);
                let z = tape.add_row(z, b2v);
                let pred = tape.sigmoid(z);
                let pv = tape.value(pred);
                let pb = BoundingBox { cx: pv.data[0], cy: pv.data[1], w: pv.data[2], h: pv.data[3] };
                let val = iou(&pb, &s.gt_box).unwrap();
                miou += val;
                if val >= 0.5 { p50 += 1.0; }
            }
            let n = xe.len() as f64;
            println!("epoch {epoch}: eval mean_iou {:.4} pr50 {:.3}", miou / n, p50 / n);
        }
    }
}
