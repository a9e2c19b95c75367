//! Print a few task instances with their correct responses and fork positions.
//!
//! cargo run --release --example tasks_tour

use mdm_lab::tasks::{correct_responses, fork_witnesses, verify, TaskSpec, ENUMERATION_BUDGET};
use mdm_lab::Result;

fn main() -> Result<()> {
    for spec in [TaskSpec::arith(49, 0), TaskSpec::dag_path(8, 0)?] {
        let vocab = spec.vocabulary();
        println!("== {spec} (vocabulary of {} tokens)", vocab.size());
        for id in 0..3 {
            let inst = spec.instance(id)?;
            println!("prompt   {}", vocab.decode(&inst.prompt));
            for r in correct_responses(&inst, ENUMERATION_BUDGET)? {
                println!("  answer {}", vocab.decode(&r));
            }
            for w in fork_witnesses(&inst)? {
                println!(
                    "  fork at {}: {} | {}",
                    w.position,
                    vocab.decode(&w.first),
                    vocab.decode(&w.second)
                );
            }
            let wrong = vec![vocab.eos_id()];
            let r = verify(&inst, &wrong);
            println!("  empty response scores correct={} format={}", r.correct, r.format);
        }
    }
    Ok(())
}
