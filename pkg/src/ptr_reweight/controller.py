"""Adaptive scale control of scorer temperature, weight temperature and hard-negative ratio."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class RefinerConfig:
    ema_decay: float = 0.98
    low_acc: float = 0.05
    high_acc: float = 0.35
    margin_gate: float = 0.10
    up_mult: float = 1.01
    down_mult: float = 0.995
    interp_lo: float = 0.10
    interp_hi: float = 0.50
    hard_max: float = 0.5
    tau_bounds: tuple[float, float] = (0.03, 0.20)
    beta_bounds: tuple[float, float] = (0.5, 3.0)
    hard_bounds: tuple[float, float] = (0.0, 0.5)

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")


@dataclass(frozen=True)
class ControllerState:
    ema_acc: float = 0.0
    ema_margin: float = 0.0
    ema_T: float = 0.0
    ema_valid: float = 0.0
    tau: float = 0.12
    beta: float = 1.5
    hard_ratio: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _clamp(x: float, bounds: tuple[float, float]) -> float:
    return min(max(x, bounds[0]), bounds[1])


def update_stats(state: ControllerState, stats, cfg: RefinerConfig = RefinerConfig()) -> ControllerState:
    """Fold one (acc, margin, mean_T, valid_ratio) tuple into the EMAs."""
    acc, margin, mean_T, valid = stats
    k = cfg.ema_decay
    return replace(
        state,
        ema_acc=k * state.ema_acc + (1.0 - k) * acc,
        ema_margin=k * state.ema_margin + (1.0 - k) * margin,
        ema_T=k * state.ema_T + (1.0 - k) * mean_T,
        ema_valid=k * state.ema_valid + (1.0 - k) * valid,
    )


def adapt(state: ControllerState, cfg: RefinerConfig = RefinerConfig()) -> ControllerState:
    """Apply one logging-step adjustment.

    Weak scorer (EMA accuracy below ``low_acc``): tau and beta grow by
    ``up_mult``. Confident scorer (accuracy above ``high_acc`` and margin
    above ``margin_gate``): both shrink by ``down_mult``. The hard-negative
    ratio follows accuracy linearly on ``[interp_lo, interp_hi]`` regardless
    of branch.
    """
    tau, beta = state.tau, state.beta
    if state.ema_acc < cfg.low_acc:
        tau *= cfg.up_mult
        beta *= cfg.up_mult
    elif state.ema_acc > cfg.high_acc and state.ema_margin > cfg.margin_gate:
        tau *= cfg.down_mult
        beta *= cfg.down_mult
    frac = (state.ema_acc - cfg.interp_lo) / (cfg.interp_hi - cfg.interp_lo)
    hard = cfg.hard_max * min(max(frac, 0.0), 1.0)
    return replace(
        state,
        tau=_clamp(tau, cfg.tau_bounds),
        beta=_clamp(beta, cfg.beta_bounds),
        hard_ratio=_clamp(hard, cfg.hard_bounds),
    )


CSV_FIELDS = ("step", "tau", "beta", "hard_ratio", "ema_acc", "ema_margin")


def trajectory_row(step: int, state: ControllerState) -> dict:
    return {"step": step, "tau": state.tau, "beta": state.beta, "hard_ratio": state.hard_ratio,
            "ema_acc": state.ema_acc, "ema_margin": state.ema_margin}
