use deltaedit::evaluation::EvalError;
use deltaedit::inference::InferenceError;
use deltaedit::numerics::NumericsError;
use deltaedit::relevance::RelevanceError;
use deltaedit::store::StoreError;
use deltaedit::training::TrainError;
use deltaedit::world::WorldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numerical => 3,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type Result<T> = std::result::Result<T, Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        kind: Kind::Usage,
        error: anyhow::anyhow!(msg.into()),
    }
}

pub fn data(msg: impl Into<String>) -> Failure {
    Failure {
        kind: Kind::Data,
        error: anyhow::anyhow!(msg.into()),
    }
}

fn numerics_kind(e: &NumericsError) -> Kind {
    match e {
        NumericsError::NonFiniteGradient { .. } => Kind::Numerical,
        _ => Kind::Data,
    }
}

fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Diverged(_) => Kind::Numerical,
        TrainError::Numerics(n) => numerics_kind(n),
        TrainError::InvalidConfig(_) => Kind::Usage,
        _ => Kind::Data,
    }
}

macro_rules! failure_from {
    ($t:ty, $kind:expr) => {
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                let kind: fn(&$t) -> Kind = $kind;
                Failure {
                    kind: kind(&e),
                    error: e.into(),
                }
            }
        }
    };
}

failure_from!(StoreError, |_| Kind::Data);
failure_from!(WorldError, |e| match e {
    WorldError::InvalidConfig(_) => Kind::Usage,
    _ => Kind::Data,
});
failure_from!(RelevanceError, |_| Kind::Data);
failure_from!(InferenceError, |_| Kind::Data);
failure_from!(TrainError, train_kind);
failure_from!(EvalError, |e| match e {
    EvalError::Train(t) => train_kind(t),
    _ => Kind::Data,
});

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            kind: Kind::Data,
            error: e.into(),
        }
    }
}

/// Attach a kind to an `anyhow` result.
pub trait WithKind<T> {
    fn kind(self, kind: Kind) -> Result<T>;
}

impl<T> WithKind<T> for anyhow::Result<T> {
    fn kind(self, kind: Kind) -> Result<T> {
        self.map_err(|error| Failure { kind, error })
    }
}
