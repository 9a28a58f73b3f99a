use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies on the line through the torus apexes (|kappa| = {kappa})")]
    DegenerateLine { kappa: f64 },

    #[error("coincident points: {0}")]
    CoincidentPoints(&'static str),

    #[error("{name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("energy {energy} keV outside the physical band ({lo}, {hi}] keV")]
    EnergyOutOfBand { energy: f64, lo: f64, hi: f64 },

    #[error("cone and torus do not intersect on the oriented branch")]
    NoIntersection,

    #[error("inadmissible geometry: {0}")]
    Inadmissible(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("negative Poisson mean {0}")]
    NegativeMean(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_open(name: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<()> {
    if value > lo && value < hi {
        Ok(())
    } else {
        Err(Error::OutOfRange { name, value, range })
    }
}
