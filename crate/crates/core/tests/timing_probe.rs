// Manual sizing probe; run with: cargo test -p fvrecon-core --test timing_probe -- --ignored --nocapture
use fvrecon_core::data::{synth_dataset, AttributeSchema};
use fvrecon_core::generator::{train_tiny_generator, GanTrainConfig};
use std::time::Instant;

#[test]
#[ignore]
fn time_gan_epoch() {
    let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
    let ds = synth_dataset(1, 600, 32, &schema).unwrap();
    let cfg = GanTrainConfig {
        epochs: 25,
        batch_size: 16,
        ..Default::default()
    };
    let t1 = Instant::now();
    match train_tiny_generator(&ds, &cfg) {
        Ok(out) => {
            println!("total {:?}", t1.elapsed());
            for p in &out.curve {
                println!("epoch {:2} d {:.3} g {:.3} fd {:.4} std {:.4}", p.epoch, p.d_loss, p.g_loss, p.feature_distance, p.sample_std);
            }
            out.generator.save(std::path::Path::new("/tmp/probe_gen.fva")).unwrap();
            println!("samples at /tmp/probe_gen.samples.png");
        }
        Err(e) => println!("FAILED after {:?}: {e}", t1.elapsed()),
    }
}
