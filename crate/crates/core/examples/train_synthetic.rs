//! Trains a model on generated data and prints one line per epoch.
//!
//! `cargo run --release --example train_synthetic -- [epochs] [count] [size] [variant]`

use std::time::Instant;

use urwkv::data::gen_synthetic;
use urwkv::model::{Model, ModelConfig, Variant};
use urwkv::train::{train_with, TrainConfig};

fn main() -> urwkv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (epochs, count, size) = (arg(0, 20), arg(1, 200), arg(2, 64));
    let variant = match args.get(3).map(String::as_str) {
        Some("full") => Variant::Full,
        _ => Variant::Small,
    };
    let data = gen_synthetic(7, count, size);
    let cfg = ModelConfig {
        variant,
        image_size: size,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::build(&cfg)?;
    let start = Instant::now();
    let tc = TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train_with(&mut model, &data, &tc, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  dice {:.4}  iou {:.4}  ({:.1}s)",
            r.epoch,
            r.loss,
            r.dice,
            r.iou,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("best epoch {:?}", out.best_epoch);
    Ok(())
}
