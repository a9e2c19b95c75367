//! Decode one held-out instance under every generation order and print the
//! order in which response positions were finalized.
//!
//! cargo run --release --example decode_orders -- [checkpoint]

mod common;

use mdm_lab::decoding::{decode, DecodeConfig, DecodeMode};
use mdm_lab::rng::{derive_stream, StreamKey};
use mdm_lab::tasks::verify;
use mdm_lab::Result;

fn main() -> Result<()> {
    let arg = std::env::args().nth(1);
    let params = common::base_model(arg.as_deref())?;
    let spec = common::task();
    let vocab = spec.vocabulary();
    let inst = &common::held_out(1)?[0];
    println!("prompt {}", vocab.decode(&inst.prompt));
    println!("forks  {:?}", inst.fork_positions);

    for mode in DecodeMode::ALL {
        let mut cfg = DecodeConfig::new(mode, common::GEN_BUDGET, 0.0);
        if mode == DecodeMode::EbParallel {
            cfg.eb_gamma = 0.5;
        }
        let mut rng = derive_stream(7, StreamKey::new("example", inst.id, 0, 0));
        let (completion, trace) = decode(&params, &inst.prompt, &cfg, vocab.specials(), &mut rng)?;
        let reward = verify(inst, completion.tokens());
        println!(
            "\n{mode:<12} {:<14} correct={} steps={} bypassed={}",
            vocab.decode(completion.answer(vocab.eos_id())),
            reward.is_correct(),
            trace.steps,
            trace.bypass_count()
        );
        let order: Vec<String> = trace.order().iter().map(|p| p.to_string()).collect();
        println!("  order   {}", order.join(" "));
        let ent: Vec<String> = trace.records.iter().take(6).map(|r| format!("{:.2}", r.entropy)).collect();
        println!("  entropy {} ...", ent.join(" "));
    }
    Ok(())
}
