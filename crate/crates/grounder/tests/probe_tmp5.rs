// Temporary diagnostic; not part of the suite.
use grounder::config::ModelConfig;
use grounder::data::{make_split, GenConfig, Vocab};
use grounder::model::Model;
use grounder::trainer::{train, AdamW, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_nonzero_up() {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 32;
    cfg.vision_depth = 3;
    cfg.vision_dim = 64;
    cfg.bottleneck_dim = 16;
    cfg.head_hidden_dim = 128;
    cfg.cia_layers = vec![1, 2];
    cfg.dosa_layers = vec![0, 1];
    cfg.learning_rate = 0.01;
    cfg.batch_size = 8;
    cfg.epochs = 20;
    let gen = GenConfig {
        canvas_size: cfg.image_size,
        min_objects: 1,
        max_objects: 1,
        ambiguity_bias: 0.0,
        ..GenConfig::default()
    };
    let vocab = Vocab::standard();
    let split = make_split(&gen, 1000, 300, 5, &vocab, cfg.max_text_len).unwrap();
    let mut model = Model::new(cfg.clone(), cfg.seed);
    // Re-init all zero-init up projections with random values.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let up_ids: Vec<usize> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".up"))
        .map(|(id, _)| id)
        .collect();
    for id in up_ids {
        let (r, c) = {
            let t = model.store.value(id);
            (t.rows, t.cols)
        };
        let std = (2.0 / r as f64).sqrt();
        let fresh = grounder::tensor::Tensor::randn(r, c, std, &mut rng);
        *model.store.value_mut(id) = fresh;
        println!("re-init param {id} {r}x{c} std {std:.3}");
    }
    let mut opt = AdamW::new(&model.store);
    let opts = TrainOptions { log_path: None, eval_every: 2, checkpoint_dir: None };
    let out = train(&mut model, &mut opt, &split, &opts).unwrap();
    for (e, m) in &out.eval_history {
        println!("epoch {e}: mean_iou {:.4} pr50 {:.3}", m.mean_iou, m.pr50);
    }
}
