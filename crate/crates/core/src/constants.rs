//! Physical constants (CODATA 2018 exact or recommended values).

pub const HBAR: f64 = 1.054_571_817e-34;
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Standard gravity, m/s².
pub const STANDARD_GRAVITY: f64 = 9.806_65;

pub const MICRO: f64 = 1e-6;
pub const NANO: f64 = 1e-9;

/// Converts a temperature in kelvin to an energy in joules.
pub fn kelvin_to_joules(t: f64) -> f64 {
    BOLTZMANN * t
}

pub fn joules_to_microkelvin(e: f64) -> f64 {
    e / BOLTZMANN / MICRO
}

pub fn microkelvin_to_joules(t_uk: f64) -> f64 {
    t_uk * MICRO * BOLTZMANN
}
