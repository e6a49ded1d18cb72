// Temporary diagnostic; not part of the suite.
use grounder::boxes::{iou, BoundingBox};
use grounder::config::ModelConfig;
use grounder::data::{make_split, GenConfig, Vocab};
use grounder::model::Model;

fn solve(a: &mut Vec<Vec<f64>>, b: &mut Vec<Vec<f64>>) {
    // Gaussian elimination, a is square n x n, b is n x m.
    let n = a.len();
    for i in 0..n {
        let mut p = i;
        for r in i + 1..n {
            if a[r][i].abs() > a[p][i].abs() {
                p = r;
            }
        }
        a.swap(i, p);
        b.swap(i, p);
        let d = a[i][i];
        for c in i..n {
            a[i][c] /= d;
        }
        for c in 0..b[i].len() {
            b[i][c] /= d;
        }
        for r in 0..n {
            if r != i && a[r][i] != 0.0 {
                let f = a[r][i];
                for c in i..n {
                    a[r][c] -= f * a[i][c];
                }
                for c in 0..b[r].len() {
                    b[r][c] -= f * b[i][c];
                }
            }
        }
    }
}

#[test]
#[ignore]
fn probe_ridge_ceiling() {
    let depth: usize = std::env::var("PROBE_DEPTH").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let patch: usize = std::env::var("PROBE_PATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 32;
    cfg.patch_size = patch;
    cfg.vision_depth = depth;
    cfg.vision_dim = 64;
    cfg.cia_layers = if depth >= 2 { vec![depth - 2, depth - 1] } else { vec![0] };
    cfg.dosa_layers = vec![0, 1];
    let gen = GenConfig {
        canvas_size: cfg.image_size,
        min_objects: 1,
        max_objects: 1,
        ambiguity_bias: 0.0,
        ..GenConfig::default()
    };
    let vocab = Vocab::standard();
    let split = make_split(&gen, 1200, 300, 5, &vocab, cfg.max_text_len).unwrap();
    let model = Model::new(cfg.clone(), cfg.seed);
    let feats = |samples: &[grounder::data::Sample]| -> Vec<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let fwd = model.forward(&s.image, &s.word_ids).unwrap();
                let mut f = fwd.tape.value(fwd.reg_final).data.clone();
                f.push(1.0);
                f
            })
            .collect()
    };
    let xf = feats(&split.train);
    let xe = feats(&split.eval);
    let d = xf[0].len();
    // targets in logit space
    let logit = |v: f64| (v.clamp(1e-4, 1.0 - 1e-4) / (1.0 - v.clamp(1e-4, 1.0 - 1e-4))).ln();
    let ys: Vec<Vec<f64>> = split
        .train
        .iter()
        .map(|s| vec![logit(s.gt_box.cx), logit(s.gt_box.cy), logit(s.gt_box.w), logit(s.gt_box.h)])
        .collect();
    for lam in [1e-4, 1e-2, 1.0] {
        let mut ata = vec![vec![0.0; d]; d];
        let mut atb = vec![vec![0.0; 4]; d];
        for (x, y) in xf.iter().zip(&ys) {
            for i in 0..d {
                for j in 0..d {
                    ata[i][j] += x[i] * x[j];
                }
                for j in 0..4 {
                    atb[i][j] += x[i] * y[j];
                }
            }
        }
        for i in 0..d {
            ata[i][i] += lam;
        }
        solve(&mut ata, &mut atb);
        let mut miou = 0.0;
        let mut p50 = 0.0;
        for (x, s) in xe.iter().zip(&split.eval) {
            let mut z = [0.0; 4];
            for j in 0..4 {
                for i in 0..d {
                    z[j] += x[i] * atb[i][j];
                }
            }
            let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
            let pred = BoundingBox { cx: sg(z[0]), cy: sg(z[1]), w: sg(z[2]), h: sg(z[3]) };
            let v = iou(&pred, &s.gt_box).unwrap();
            miou += v;
            if v >= 0.5 {
                p50 += 1.0;
            }
        }
        let n = split.eval.len() as f64;
        println!("lambda {lam:.0e}: eval mean_iou {:.4} pr50 {:.3}", miou / n, p50 / n);
    }
}
