//! Trains one configuration on freshly generated synthetic data and prints
//! per-epoch validation recall and the final test recall.
//!
//! Usage: `compare [pooling] [loss] [seed] [epochs] [key=value ...]`; keys
//! prefixed with `synth.` go to the data generator.

use std::time::Instant;

use tapir_core::config::TrainConfig;
use tapir_core::data::{synth_generate, SynthConfig, SynthSplit};
use tapir_core::eval::{evaluate_dataset, score_matrix_eval, EvalOptions};
use tapir_core::model::{encode_audio, encode_text, tap_attention, RetrievalModel};
use tapir_core::trainer::{train_with, Progress};
use tapir_core::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let get = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mut text = format!(
        "pooling = {}\nloss = {}\nseed = {}\nepochs = {}\n",
        get(0, "tap"),
        get(1, "ntxent"),
        get(2, "0"),
        get(3, "10")
    );
    let mut synth_text = String::new();
    for extra in args.iter().skip(4) {
        match extra.strip_prefix("synth.") {
            Some(kv) => synth_text.push_str(kv),
            None => text.push_str(extra),
        }
        synth_text.push('\n');
        text.push('\n');
    }
    let cfg = TrainConfig::parse(&text)?;
    let data = synth_generate(&SynthConfig {
        seed: cfg.seed,
        ..SynthConfig::parse(&synth_text)?
    })?;
    let start = Instant::now();
    let mut losses = Vec::new();
    let out = train_with(&cfg, &data.train.dataset, Some(&data.val.dataset), |p| match p {
        Progress::Step(s) => losses.push(s.loss),
        Progress::Epoch(e) => {
            let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            losses.clear();
            println!(
                "epoch {:>3}  loss {:.4}  t2a R@1 {:.3}  a2t R@1 {:.3}  ({:.1}s)",
                e.epoch,
                mean_loss,
                e.validation.t2a.r_at[&1],
                e.validation.a2t.r_at[&1],
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let best = out.best.to_model()?;
    let test = evaluate_dataset(&best, &data.test.dataset, &cfg.eval_ks, &EvalOptions::default())?;
    println!("best epoch {}", out.best.epoch);
    print!("{}", test.to_key_values());
    diagnose(&best, &data.test)?;
    Ok(())
}

/// R@1 (t2a) split by caption size, next to an event-count oracle, and the
/// attention mass TAP puts on relevant frames of the paired clip.
fn diagnose(model: &RetrievalModel, split: &SynthSplit) -> Result<(), Box<dyn std::error::Error>> {
    let ds = &split.dataset;
    let tokens: Vec<&Tensor> = ds.captions().map(|(_, c)| &c.tokens).collect();
    let frames: Vec<&Tensor> = ds.items.iter().map(|it| &it.frames).collect();
    let s = score_matrix_eval(model, &tokens, &frames, &EvalOptions::default())?;
    let mut hits = [[0usize; 2]; 3];
    let mut oracle = [0.0f64; 3];
    let mut mass = (0.0, 0usize);
    for (c, (a, cap)) in ds.captions().enumerate() {
        let cap_idx = ds.items[a].captions.iter().position(|x| x.id == cap.id).unwrap();
        let events = &split.labels[a].caption_events[cap_idx];
        let n = events.len().min(2);
        let row = s.values.row_slice(c);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits[n][0] += usize::from(best == a);
        hits[n][1] += 1;
        // clips containing every caption event as a relevant event
        let tied = split
            .labels
            .iter()
            .filter(|l| events.iter().all(|e| l.events.contains(e)))
            .count();
        oracle[n] += 1.0 / tied as f64;
        if let Some(tap) = &model.params.tap {
            let ct = encode_text(&cap.tokens, &model.params.encoder)?;
            let ca = encode_audio(&ds.items[a].frames, &model.params.encoder)?;
            let w = tap_attention(&ct, &ca, tap)?;
            let m: f64 = (0..w.numel())
                .filter(|&f| split.labels[a].is_relevant(f))
                .map(|f| w.data()[f])
                .sum();
            mass.0 += m;
            mass.1 += 1;
        }
    }
    for n in 1..=2 {
        let label = if n == 1 { "1 event" } else { "2+ events" };
        println!(
            "captions with {label}: {}  R@1 {:.3}  oracle {:.3}",
            hits[n][1],
            hits[n][0] as f64 / hits[n][1] as f64,
            oracle[n] / hits[n][1] as f64
        );
    }
    if mass.1 > 0 {
        let labels = &split.labels[0];
        let relevant = (0..labels.frame_events.len())
            .filter(|&f| labels.is_relevant(f))
            .count();
        println!(
            "mean attention on relevant frames {:.3} (uniform would be {:.3})",
            mass.0 / mass.1 as f64,
            relevant as f64 / labels.frame_events.len() as f64
        );
    }
    Ok(())
}
