//! Adversarial objectives, all in minimization form: the discriminator
//! minimizes `*_loss_d`, the generator minimizes `*_loss_g`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Non-saturating cross-entropy.
    Ns,
    Hinge,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ns => "ns",
            LossKind::Hinge => "hinge",
        }
    }

    pub fn discriminator(self, g: &mut Graph, real: Var, fake: Var) -> Var {
        match self {
            LossKind::Ns => ns_loss_d(g, real, fake),
            LossKind::Hinge => hinge_loss_d(g, real, fake),
        }
    }

    pub fn generator(self, g: &mut Graph, fake: Var) -> Var {
        match self {
            LossKind::Ns => ns_loss_g(g, fake),
            LossKind::Hinge => hinge_loss_g(g, fake),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ns" => Ok(LossKind::Ns),
            "hinge" => Ok(LossKind::Hinge),
            _ => Err(Error::Configuration(format!("unknown loss `{s}`"))),
        }
    }
}

/// `−mean log σ(r) − mean log(1 − σ(f))`, written with softplus:
/// `−log σ(x) = softplus(−x)` and `−log(1 − σ(x)) = softplus(x)`.
pub fn ns_loss_d(g: &mut Graph, real: Var, fake: Var) -> Var {
    let nr = g.neg(real);
    let a = g.softplus(nr);
    let a = g.mean(a);
    let b = g.softplus(fake);
    let b = g.mean(b);
    g.add(a, b).expect("rank-0 operands")
}

/// `−mean log σ(f)`.
pub fn ns_loss_g(g: &mut Graph, fake: Var) -> Var {
    let nf = g.neg(fake);
    let s = g.softplus(nf);
    g.mean(s)
}

/// `mean relu(1 − r) + mean relu(1 + f)`.
pub fn hinge_loss_d(g: &mut Graph, real: Var, fake: Var) -> Var {
    let nr = g.neg(real);
    let a = g.offset(nr, 1.0);
    let a = g.relu(a);
    let a = g.mean(a);
    let b = g.offset(fake, 1.0);
    let b = g.relu(b);
    let b = g.mean(b);
    g.add(a, b).expect("rank-0 operands")
}

/// `−mean f`.
pub fn hinge_loss_g(g: &mut Graph, fake: Var) -> Var {
    let m = g.mean(fake);
    g.neg(m)
}
