use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params_init::count;
use crate::peft::{closed_form_trainable, Method, PeftConfig};

/// Learnable-parameter budget: a fixed rank, or a cap on the trainable
/// fraction of all parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Rank(usize),
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetFit {
    pub config: PeftConfig,
    pub trainable: usize,
    pub total: usize,
}

impl BudgetFit {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Tokens matched to rank `r` at the default 4 tokens per 32 ranks.
fn scaled_tokens(r: usize) -> usize {
    ((r as f64 * 4.0 / 32.0).round() as usize).max(1)
}

fn evaluate(cfg: PeftConfig, backbone: &BackboneConfig, base: usize) -> BudgetFit {
    let trainable = closed_form_trainable(&cfg, backbone);
    let peft = count(&crate::peft::peft_param_specs(&cfg, backbone));
    BudgetFit { config: cfg, trainable, total: base + peft }
}

/// Largest configuration of `method` within `budget`. Rank is maximized
/// first (with one token), then tokens up to the rank-scaled default.
pub fn budget_fit(method: Method, budget: Budget, backbone: &BackboneConfig) -> Result<BudgetFit> {
    backbone.validate()?;
    let base = count(&backbone.param_specs());
    let head = backbone.d * backbone.classes + backbone.classes;
    let frac = match budget {
        Budget::Rank(r) => {
            if r == 0 {
                return Err(Error::Argument("rank budget must be at least 1".into()));
            }
            let m = if method == Method::Prompt { r } else { scaled_tokens(r) };
            let cfg = PeftConfig::new(method).with_rank(r).with_tokens(m);
            return Ok(evaluate(cfg, backbone, base));
        }
        Budget::Fraction(f) if f > 0.0 && f < 1.0 => f,
        Budget::Fraction(f) => return Err(Error::Argument(format!("budget fraction {f} outside (0, 1)"))),
    };
    let floor = head as f64 / base as f64;
    if frac < floor {
        return Err(Error::Infeasible(format!(
            "budget {frac} is below the head-only floor {floor:.6} ({head} of {base} parameters)"
        )));
    }
    let fits = |fit: &BudgetFit| fit.trainable as f64 <= frac * fit.total as f64;
    let limit = 4 * backbone.d * backbone.ffn_mult;
    let search = |make: &dyn Fn(usize) -> PeftConfig| -> Option<BudgetFit> {
        let mut best = None;
        for v in 1..=limit {
            let fit = evaluate(make(v), backbone, base);
            if !fits(&fit) {
                break;
            }
            best = Some(fit);
        }
        best
    };
    let infeasible = |what: &str| {
        Error::Infeasible(format!("{method} with {what} = 1 exceeds budget {frac} (floor {floor:.6})"))
    };
    match method {
        Method::Linear | Method::BitFit => {
            let fit = evaluate(PeftConfig::new(method), backbone, base);
            if fits(&fit) {
                Ok(fit)
            } else {
                Err(Error::Infeasible(format!("{method} needs fraction {:.6} > budget {frac}", fit.fraction())))
            }
        }
        Method::Prompt => search(&|m| PeftConfig::new(method).with_tokens(m)).ok_or_else(|| infeasible("m")),
        _ => {
            let by_rank = search(&|r| PeftConfig::new(method).with_rank(r).with_tokens(1)).ok_or_else(|| infeasible("r"))?;
            if !method.uses_tokens() {
                return Ok(by_rank);
            }
            let r = by_rank.config.rank;
            let cap = scaled_tokens(r);
            let mut best = by_rank;
            for m in 2..=cap {
                let fit = evaluate(PeftConfig::new(method).with_rank(r).with_tokens(m), backbone, base);
                if !fits(&fit) {
                    break;
                }
                best = fit;
            }
            Ok(best)
        }
    }
}
