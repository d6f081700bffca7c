/// Multi-step schedule: `base` divided by `1/gamma` once per milestone reached.
pub fn lr_at(epoch: usize, base: f64, milestones: &[usize], gamma: f64) -> f64 {
    let n = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    base / (1.0 / gamma).powi(n)
}
