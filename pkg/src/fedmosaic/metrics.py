"""Run records, evaluation and convergence diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .learner import (
    Model, grad_combined, per_example_grads, predict_probs,
)

ROUND_COLUMNS = (
    "round", "client_id", "lambda", "loss_priv", "loss_pseudo", "test_acc",
    "pseudo_label_drift", "uplink_bytes", "downlink_bytes", "grad_norm_sq",
)


@dataclass
class RoundStat:
    round: int
    client_id: int
    lam: float
    loss_priv: float
    loss_pseudo: Optional[float]
    test_acc: float
    grad_norm_sq: float
    uplink_bytes: float = 0.0
    downlink_bytes: float = 0.0
    pseudo_label_drift: Optional[float] = None


@dataclass
class SyncStat:
    round: int
    labels: list
    drift: Optional[float] = None
    pseudo_label_acc: Optional[float] = None
    objective_drift: Optional[list] = None
    sigma_bar_sq: list = field(default_factory=list)
    sigma_tilde_sq: list = field(default_factory=list)


@dataclass
class LedgerEntry:
    round: int
    uplink_label_entries: int = 0
    uplink_scalars: int = 0
    uplink_bytes: float = 0.0
    uplink_wire_bytes: int = 0
    downlink_label_entries: int = 0
    downlink_bytes: float = 0.0
    downlink_wire_bytes: int = 0

    @property
    def has_traffic(self) -> bool:
        return bool(self.uplink_label_entries or self.downlink_label_entries
                    or self.uplink_scalars)


@dataclass
class RunRecord:
    config: dict
    seed: int
    num_clients: int
    public_size: int
    rounds: list = field(default_factory=list)
    syncs: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    final_models: list = field(default_factory=list)
    smoothness: list = field(default_factory=list)
    min_shard_size: int = 0

    def _series(self, client_id: int, attr: str) -> np.ndarray:
        rows = sorted((r for r in self.rounds if r.client_id == client_id), key=lambda r: r.round)
        return np.array([getattr(r, attr) for r in rows], dtype=np.float64)

    def lambdas(self, client_id: int) -> np.ndarray:
        return self._series(client_id, "lam")

    def grad_norms(self, client_id: int) -> np.ndarray:
        return self._series(client_id, "grad_norm_sq")

    def test_accs(self, client_id: int) -> np.ndarray:
        return self._series(client_id, "test_acc")

    def final_accuracies(self) -> np.ndarray:
        return np.array([self.test_accs(i)[-1] for i in range(self.num_clients)])

    @property
    def sync_rounds(self) -> list:
        return [s.round for s in self.syncs]

    @property
    def drifts(self) -> list:
        return [s.drift for s in self.syncs if s.drift is not None]

    def total(self, column: str):
        return sum(getattr(e, column) for e in self.ledger)

    def models(self) -> list:
        return [Model.from_dict(d) for d in self.final_models]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "num_clients": self.num_clients,
            "public_size": self.public_size,
            "min_shard_size": self.min_shard_size,
            "rounds": [asdict(r) for r in self.rounds],
            "syncs": [asdict(s) for s in self.syncs],
            "ledger": [asdict(e) for e in self.ledger],
            "final_models": self.final_models,
            "smoothness": self.smoothness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config=d["config"], seed=d["seed"], num_clients=d["num_clients"],
            public_size=d["public_size"], min_shard_size=d.get("min_shard_size", 0),
            rounds=[RoundStat(**r) for r in d["rounds"]],
            syncs=[SyncStat(**s) for s in d["syncs"]],
            ledger=[LedgerEntry(**e) for e in d["ledger"]],
            final_models=d["final_models"], smoothness=d["smoothness"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in sorted(self.rounds, key=lambda r: (r.round, r.client_id)):
            w.writerow([
                r.round, r.client_id, _fmt(r.lam), _fmt(r.loss_priv), _fmt(r.loss_pseudo),
                _fmt(r.test_acc), _fmt(r.pseudo_label_drift), _fmt(r.uplink_bytes),
                _fmt(r.downlink_bytes), _fmt(r.grad_norm_sq),
            ])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def accuracy(model: Model, test) -> float:
    if len(test.y) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict_probs(model, test.X), axis=1)
    return float(np.mean(pred == test.y))


def pseudo_label_drift(prev, curr) -> float:
    """Fraction of public examples whose consensus label changed."""
    prev, curr = np.asarray(prev), np.asarray(curr)
    if prev.shape != curr.shape:
        raise ValueError("label vectors differ in length")
    if prev.size == 0:
        return 0.0
    return float(np.mean(prev != curr))


def grad_norm_sq_sample(model: Model, X_priv, y_priv, X_pseudo=None, y_pseudo=None,
                        lam: float = 0.0) -> float:
    g = grad_combined(model, X_priv, y_priv, X_pseudo, y_pseudo, lam)
    return float(g @ g)


def gradient_variance(model: Model, X, y) -> float:
    """Mean squared deviation of per-example gradients from their mean."""
    if len(y) == 0:
        return 0.0
    G = per_example_grads(model, X, y)
    return float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))


def estimate_smoothness(model: Model, X_priv, y_priv, X_pseudo=None, y_pseudo=None,
                        lam: float = 0.0, iters: int = 20, eps: float = 1e-5,
                        seed: int = 0) -> float:
    """Local Hessian spectral-norm probe by power iteration on finite-difference
    Hessian-vector products. A local estimate, not a global constant."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=model.params.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        gp = grad_combined(model.with_params(model.params + eps * v), X_priv, y_priv,
                           X_pseudo, y_pseudo, lam)
        gm = grad_combined(model.with_params(model.params - eps * v), X_priv, y_priv,
                           X_pseudo, y_pseudo, lam)
        hv = (gp - gm) / (2 * eps)
        est = float(np.linalg.norm(hv))
        if est == 0.0:
            break
        v = hv / est
    return est


def convergence_bound(L0: float, Lstar: float, L_smooth: float, sigma_bar_sq: float,
                       sigma_tilde_sq: float, d: int, U_size: int, delta: float,
                       T: int) -> float:
    """Right-hand side of the average squared-gradient-norm bound:

        4 L (L0 - L*) / T + sigma_bar^2 / (2 L d) + e^2 sigma_tilde^2 / (2 L |U|) + 2 delta
    """
    if not L_smooth > 0:
        raise ValueError("smoothness constant must be positive")
    if d < 1 or U_size < 1 or T < 1:
        raise ValueError("d, |U| and T must be >= 1")
    if L0 < Lstar:
        raise ValueError("L0 must be >= L*")
    if sigma_bar_sq < 0 or sigma_tilde_sq < 0 or delta < 0:
        raise ValueError("variances and drift must be non-negative")
    return (4.0 * L_smooth * (L0 - Lstar) / T
            + sigma_bar_sq / (2.0 * L_smooth * d)
            + math.e ** 2 * sigma_tilde_sq / (2.0 * L_smooth * U_size)
            + 2.0 * delta)


# name used by the experiment contract
proposition1_bound = convergence_bound


def _quarter_means(x: np.ndarray):
    q = max(1, len(x) // 4)
    return float(np.mean(x[:q])), float(np.mean(x[-q:]))


def trend_checks(record: RunRecord) -> dict:
    """Per-client gradient-norm and lambda trends plus consensus drift trend."""
    T = len({r.round for r in record.rounds})
    if T < 8:
        raise ValueError(f"run has {T} rounds; need at least 8 to compare quarters")
    clients = []
    for i in range(record.num_clients):
        g = record.grad_norms(i)
        first, last = _quarter_means(g)
        if first == 0.0:
            status, ratio, decreased = "converged at start", None, None
        else:
            ratio = last / first
            decreased = last < first
            status = "decreasing" if decreased else "not decreasing"
        lam = record.lambdas(i)
        clients.append({
            "client_id": i,
            "grad_first_quarter": first,
            "grad_last_quarter": last,
            "ratio": ratio,
            "decreased": decreased,
            "status": status,
            "lambda_min": float(lam.min()),
            "lambda_max": float(lam.max()),
            "lambda_final": float(lam[-1]),
        })
    drifts = record.drifts
    drift = {
        "values": drifts,
        "first": drifts[0] if drifts else None,
        "final": drifts[-1] if drifts else None,
        "non_increasing": (drifts[-1] <= drifts[0]) if drifts else None,
    }
    return {"rounds": T, "clients": clients, "drift": drift, "bound": bound_report(record)}


def bound_report(record: RunRecord) -> list:
    """Compare the observed mean squared gradient norm with the bound evaluated on
    empirical estimates. Reported only: the assumption constants are estimates."""
    if not record.syncs or not record.smoothness:
        return []
    T = len({r.round for r in record.rounds})
    kind = record.config.get("model_kind", "")
    out = []
    for i in range(record.num_clients):
        rows = sorted((r for r in record.rounds if r.client_id == i), key=lambda r: r.round)
        L = record.smoothness[i]
        if not L > 0:
            continue
        sb = max((s.sigma_bar_sq[i] for s in record.syncs if s.sigma_bar_sq), default=0.0)
        st = max((s.sigma_tilde_sq[i] for s in record.syncs if s.sigma_tilde_sq), default=0.0)
        od = [s.objective_drift[i] for s in record.syncs if s.objective_drift]
        delta = max(od, default=0.0)
        L0 = rows[0].loss_priv
        rhs = convergence_bound(L0, 0.0, L, sb, st, max(record.min_shard_size, 1),
                                 max(record.public_size, 1), delta, T)
        lhs = float(np.mean([r.grad_norm_sq for r in rows]))
        out.append({
            "client_id": i, "observed": lhs, "bound": rhs, "holds": lhs <= rhs,
            "smoothness": L, "smoothness_source": "local Hessian probe"
            + (" (MLP)" if "mlp" in kind else ""),
            "sigma_bar_sq": sb, "sigma_tilde_sq": st, "delta": delta,
        })
    return out


def format_report(report: dict) -> str:
    lines = [f"rounds: {report['rounds']}"]
    for c in report["clients"]:
        ratio = "n/a" if c["ratio"] is None else f"{c['ratio']:.3g}"
        lines.append(
            f"client {c['client_id']}: grad^2 first={c['grad_first_quarter']:.4g} "
            f"last={c['grad_last_quarter']:.4g} ratio={ratio} ({c['status']}); "
            f"lambda min={c['lambda_min']:.3f} max={c['lambda_max']:.3f} "
            f"final={c['lambda_final']:.3f}"
        )
    d = report["drift"]
    if d["first"] is not None:
        lines.append(f"drift first={d['first']:.4f} final={d['final']:.4f} "
                     f"non-increasing={d['non_increasing']}")
    else:
        lines.append("drift: fewer than two syncs")
    for b in report.get("bound", []):
        lines.append(
            f"client {b['client_id']}: mean grad^2 {b['observed']:.4g} vs bound "
            f"{b['bound']:.4g} [{b['smoothness_source']}]"
        )
    return "\n".join(lines)
