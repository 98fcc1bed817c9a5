use crate::model::NormalizedCommand;

/// Linear blend with `λ = min(t_elapsed / T, 1)`. The timestamp is taken
/// from `to_cmd`.
pub fn clutch_blend(from_cmd: &NormalizedCommand, to_cmd: &NormalizedCommand, t_elapsed: f64, t_total: f64) -> NormalizedCommand {
    let lambda = (t_elapsed.max(0.0) / t_total).min(1.0);
    if lambda >= 1.0 {
        return *to_cmd;
    }
    NormalizedCommand::new(
        (1.0 - lambda) * from_cmd.steering + lambda * to_cmd.steering,
        (1.0 - lambda) * from_cmd.pedal + lambda * to_cmd.pedal,
        to_cmd.timestamp_ns,
    )
}
