// quick diagnostic: find a round-limited run and inspect it
use mltx::executor::{run, SimConfig, SchedulerKind};
use mltx::synth::{generate_workload, FuzzConfig};
use mltx::trace::{workload_digest, Outcome, Event};
fn splitmix64(x: u64) -> u64 { let mut z = x.wrapping_add(0x9e3779b97f4a7c15); z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9); z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb); z ^ (z >> 31) }
use mltx::workload::Workload;
use mltx::OperatorRegistry;

fn main() {
    let registry = OperatorRegistry::builtin();
    for i in 0..200u64 {
        let run_seed = splitmix64(99 ^ splitmix64(i));
        let scheduler = if i % 2 == 0 { SchedulerKind::RoundRobin } else { SchedulerKind::Random };
        let cfg = FuzzConfig::default();
        let text = generate_workload(&cfg, run_seed);
        let w = Workload::parse(&text, &registry).unwrap();
        let sim_cfg = SimConfig { seed: run_seed, scheduler, ..SimConfig::default() };
        let r = run(&w, &workload_digest(&text), &sim_cfg);
        if r.trace.footer.outcome == Outcome::RoundLimitExceeded {
            println!("=== seed {run_seed} i={i} sched={scheduler} machines={} steps_total={} max_rounds={}",
                w.programs.len(), w.total_steps(), r.trace.header.max_rounds);
            println!("committed: {:?} aborted: {:?}", r.trace.footer.committed, r.trace.footer.aborted);
            let mut victims = 0; let mut undos = 0; let mut refusals = 0; let mut grants = 0; let mut fires = 0;
            for (_, e) in r.trace.events() {
                match e {
                    Event::Victimized {..} => victims += 1,
                    Event::Undo {..} => undos += 1,
                    Event::LockRefused {..} => refusals += 1,
                    Event::LockGranted {..} => grants += 1,
                    Event::Fire {..} => fires += 1,
                    _ => {}
                }
            }
            println!("victims={victims} undos={undos} refusals={refusals} grants={grants} fires={fires}");
            // last 30 rounds agent+events
            for round in r.trace.rounds.iter().rev().take(30).rev() {
                let evs: Vec<String> = round.events.iter().map(|e| format!("{e:?}")).collect();
                println!("  [{}] {} {}", round.seq, round.agent, evs.join(" | "));
            }
            println!("{text}");
            break;
        }
    }
}
