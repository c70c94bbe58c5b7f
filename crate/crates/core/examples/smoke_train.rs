use paadet_core::{config::Config, data, train};

fn main() {
    let tmp = std::path::Path::new("/tmp/paadet_smoke");
    let _ = std::fs::remove_dir_all(tmp);
    let spec = data::SyntheticDatasetSpec {
        classes: 4,
        images_per_class: 48,
        image_size: 32,
        noise_sigma: 0.03,
        seed: 5,
    };
    data::generate_dataset(&spec, &tmp.join("data")).unwrap();
    let ds = data::load_dataset(&tmp.join("data")).unwrap();
    let mut cfg = Config::desk(3);
    cfg.train.epochs = 3;
    cfg.train.warmup_epochs = 1;
    cfg.train.milestones = vec![2];
    cfg.train.batch_size = 32;
    cfg.bank.prototypes = 4;
    let t0 = std::time::Instant::now();
    let out = train::train(&cfg, &ds, &tmp.join("run"), Some(&mut |r: &train::EpochRecord| {
        eprintln!("epoch {} lr {} pm {:.4} pce {:.4} icl {:.4} total {:.4} bank {} skipped {} [{:.1?}]",
            r.epoch, r.lr, r.pm, r.pce, r.icl, r.total, r.bank_occupancy, r.icl_skipped, t0.elapsed());
    })).unwrap();
    eprintln!("done in {:.1?}; checkpoint at {:?}", t0.elapsed(), out.checkpoint_path);
}
