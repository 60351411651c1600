//! Feeds a made-up sequence of held-out losses to the learning-rate
//! schedule and prints the rate it picks after each epoch.

use recgraph::train::LrSchedule;

fn main() {
    let losses = [2.0, 1.5, 1.2, 1.25, 1.1, 1.1, 1.0995, 1.3, 0.9];
    let mut sched = LrSchedule::new(5e-3);
    let mut fixed = LrSchedule::fixed(5e-3);
    println!("{:>5} {:>8} {:>10} {:>10}", "epoch", "cv loss", "scheduled", "fixed");
    for (e, &l) in losses.iter().enumerate() {
        println!("{:>5} {:>8.4} {:>10.2e} {:>10.2e}", e + 1, l, sched.update(l), fixed.update(l));
    }
}
