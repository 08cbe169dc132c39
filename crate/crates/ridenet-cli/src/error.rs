use ridenet::equilibrium::EquilibriumError;
use ridenet::experiments::ExperimentError;
use ridenet::fleet_sizing::FleetError;
use ridenet::fluid_ode::OdeError;
use ridenet::fluid_opt::FluidOptError;
use ridenet::model::ModelError;
use ridenet::mva::MvaError;
use ridenet::simulator::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fluid(#[from] FluidOptError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Mva(#[from] MvaError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 validation, 3 solver failure, 4 simulation abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Model(_) | CliError::Csv(_) | CliError::Io(_) => 2,
            CliError::Fluid(_) | CliError::Equilibrium(_) | CliError::Fleet(_) => 3,
            CliError::Mva(MvaError::Population) => 2,
            CliError::Mva(_) => 3,
            CliError::Ode(OdeError::DtTooLarge { .. }) => 4,
            CliError::Ode(_) => 2,
            CliError::Sim(e) => sim_code(e),
            CliError::Experiment(e) => match e {
                ExperimentError::Policy(_) | ExperimentError::Model(_) => 2,
                ExperimentError::Fluid(_) | ExperimentError::Equilibrium(_) => 3,
                ExperimentError::Sim(e) => sim_code(e),
            },
        }
    }
}

fn sim_code(e: &SimError) -> i32 {
    match e {
        SimError::InvalidDecision { .. } => 4,
        SimError::Config(_) | SimError::Model(_) => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(CliError::Equilibrium(EquilibriumError::Reducible).exit_code(), 3);
        assert_eq!(CliError::Mva(MvaError::Population).exit_code(), 2);
        let abort = SimError::InvalidDecision {
            policy: "p".into(),
            choice: 9,
            regions: 2,
            time: 0.0,
        };
        assert_eq!(CliError::Sim(abort).exit_code(), 4);
        let drift = OdeError::DtTooLarge { dt: 1.0, time: 1.0, drift: 0.1 };
        assert_eq!(CliError::Ode(drift).exit_code(), 4);
        assert_eq!(CliError::Experiment(ExperimentError::Policy("x".into())).exit_code(), 2);
    }
}
