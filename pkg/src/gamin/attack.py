"""The model-inversion attack: adversarial surrogate/generator co-training.

Per step: the generator crafts a batch from latent noise, the oracle is
queried on that batch and on a raw-noise batch (128 queries total), the
surrogate takes one Adam step on the boundary-equilibrium composite loss,
the equilibrium factor k is updated, and the generator takes one Adam step
through the frozen surrogate toward the target label. Both networks are
snapshotted whenever the global convergence score improves.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .oracle import BudgetExhausted, OracleHandle

HISTORY_COLUMNS = ("step", "Lnoise", "Lgen", "k", "m_global", "fidelity",
                   "combined_accuracy")


# ---------------------------------------------------------------------------
# scalar formulas

def surrogate_loss(l_noise, l_gen, k):
    """Boundary-equilibrium composite loss: l_noise - k * l_gen."""
    return l_noise - k * l_gen


def update_k(k, lambda_k, gamma_k, l_noise, l_gen):
    """Equilibrium factor update, clamped to [0, 1]."""
    return min(1.0, max(0.0, k + lambda_k * (gamma_k * l_noise - l_gen)))


def m_global(l_noise, l_gen, gamma_k):
    """Global convergence score: l_noise + |gamma_k * l_noise - l_gen|."""
    return l_noise + abs(gamma_k * l_noise - l_gen)


def fidelity(surrogate_preds, target_preds):
    """1 - mean absolute error between surrogate and target predictions."""
    return 1.0 - nn.mean_absolute_error(target_preds, surrogate_preds)


def combined_accuracy(generator, surrogate, target_label, probe_count, seed):
    """Fraction of latent probes the surrogate classifies as target_label
    after the generator (inference mode, no oracle queries)."""
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((probe_count, generator.spec.input_dim)).astype(np.float32)
    preds = surrogate.forward(generator.forward(z, "infer"), "infer")
    return float((np.argmax(preds, axis=1) == target_label).mean())


# ---------------------------------------------------------------------------
# architectures (fixed, target-agnostic)

def build_surrogate(input_dim, num_classes, image_shape=None) -> nn.ArchitectureSpec:
    """Fixed surrogate: two 3x3 conv+pool stages, two dropout-separated
    dense layers, softmax head."""
    from .targets import _image_shape
    shape = _image_shape(input_dim, image_shape)
    layers = (nn.reshape(shape),
              nn.conv2d(32, 3, "valid", "relu"), nn.maxpool2d(2),
              nn.conv2d(64, 3, "valid", "relu"), nn.maxpool2d(2),
              nn.flatten(),
              nn.dense(128, "relu"), nn.dropout(0.5),
              nn.dense(32, "relu"), nn.dropout(0.5),
              nn.dense(num_classes, "softmax"))
    return nn.ArchitectureSpec(input_dim, num_classes, layers)


def build_generator(latent_dim, output_dim, image_shape=None) -> nn.ArchitectureSpec:
    """Fixed generator: latent -> dense -> image grid -> three same-padded
    3x3 conv+pool stages -> tanh dense producing the image."""
    from .targets import _image_shape
    shape = _image_shape(output_dim, image_shape)
    layers = (nn.dense(output_dim, "relu"),
              nn.reshape(shape),
              nn.conv2d(128, 3, "same", "relu"), nn.maxpool2d(2), nn.dropout(0.5),
              nn.conv2d(128, 3, "same", "relu"), nn.maxpool2d(2), nn.dropout(0.5),
              nn.conv2d(64, 3, "same", "relu"), nn.maxpool2d(2),
              nn.flatten(),
              nn.dense(output_dim, "tanh"))
    return nn.ArchitectureSpec(latent_dim, output_dim, layers)


# ---------------------------------------------------------------------------
# configuration / state / report

@dataclass
class AttackConfig:
    k0: float = 0.001
    lambda_k: float = 0.01
    gamma_k: float = 0.5
    surrogate_lr: float = 1e-5
    surrogate_beta1: float = 0.99
    surrogate_beta2: float = 0.99
    surrogate_eps: float = 1e-8
    generator_lr: float = 1e-5
    generator_beta1: float = 0.99
    generator_beta2: float = 0.99
    generator_eps: float = 1e-8
    batch_size: int = 64
    latent_dim: int = 10
    budget: int = 1_280_000
    max_steps: int = 0           # 0: limited by budget only
    probe_size: int = 64
    fidelity_probe: str = "reuse"  # "reuse": step noise batch; "uniform": fresh probes
    seed: int = 0
    # optional early exit once all three thresholds hold (0 disables)
    stop_fidelity: float = 0.0
    stop_combined: float = 0.0
    stop_m_global: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.gamma_k <= 1.0:
            raise ValueError("gamma_k must lie in (0, 1]")
        if self.lambda_k <= 0:
            raise ValueError("lambda_k must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.fidelity_probe not in ("reuse", "uniform"):
            raise ValueError("fidelity_probe must be 'reuse' or 'uniform'")

    @property
    def early_stop(self):
        return self.stop_fidelity > 0 and self.stop_combined > 0 and self.stop_m_global > 0


@dataclass
class AttackState:
    step: int = 0
    k: float = 0.0
    best_m_global: float = float("inf")
    best_step: int = -1
    best_surrogate_params: list = None
    best_generator_params: list = None
    history: dict = field(default_factory=lambda: {c: [] for c in HISTORY_COLUMNS})


@dataclass
class AttackReport:
    target_label: int
    queries_consumed: int
    steps: int
    final_fidelity: float
    best_fidelity: float
    final_combined_accuracy: float
    best_combined_accuracy: float
    best_m_global: float
    best_step: int
    wall_time: float
    stopped_early: bool
    config: dict
    history: dict
    best_surrogate: "nn.Model" = None
    best_generator: "nn.Model" = None

    def summary(self):
        d = {k: v for k, v in asdict(self).items()
             if k not in ("history", "best_surrogate", "best_generator")}
        d["config"] = dict(self.config)
        return d

    def save(self, out_dir, tag="attack"):
        """Persist the report record, history CSV and best model containers."""
        out = Path(out_dir)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "history").mkdir(parents=True, exist_ok=True)
        (out / "models").mkdir(parents=True, exist_ok=True)
        base = f"{tag}_label{self.target_label}"
        paths = {
            "report": out / "reports" / f"{base}.json",
            "history": out / "history" / f"{base}.csv",
            "generator": out / "models" / f"{base}_generator.gmdl",
            "surrogate": out / "models" / f"{base}_surrogate.gmdl",
        }
        record = self.summary()
        record["artifacts"] = {k: str(v) for k, v in paths.items() if k != "report"}
        paths["report"].write_text(json.dumps(record, indent=2) + "\n")
        write_history_csv(paths["history"], self.history)
        if self.best_generator is not None:
            nn.save(self.best_generator, paths["generator"])
        if self.best_surrogate is not None:
            nn.save(self.best_surrogate, paths["surrogate"])
        return paths


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in zip(*(history[c] for c in HISTORY_COLUMNS)):
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# the attack loop

def gamin_attack(oracle: OracleHandle, target_label, cfg: AttackConfig,
                 log=None) -> AttackReport:
    """Run the inversion attack against an oracle for one target label.

    Terminates on budget exhaustion (normal), max_steps, or the optional
    early-stop thresholds. The report carries the best-scoring snapshot of
    both networks.
    """
    t0 = time.monotonic()
    if oracle.num_classes is not None and not 0 <= target_label < oracle.num_classes:
        raise ValueError(f"target label {target_label} outside oracle's "
                         f"{oracle.num_classes} classes")
    rng = np.random.default_rng(cfg.seed)
    d = oracle.input_dim
    n = cfg.batch_size

    generator = nn.Model(build_generator(cfg.latent_dim, d), seed=cfg.seed + 1)
    adam_g = nn.AdamState(generator, lr=cfg.generator_lr,
                          beta1=cfg.generator_beta1,
                          beta2=cfg.generator_beta2, eps=cfg.generator_eps)
    # the surrogate head needs the class count, which a remote oracle only
    # reveals with its first reply; built lazily just after the first query
    surrogate = adam_s = combined = one_hot = None
    state = AttackState(k=cfg.k0)
    stopped_early = False
    per_step = 2 * n + (cfg.probe_size if cfg.fidelity_probe == "uniform" else 0)

    while True:
        if cfg.max_steps and state.step >= cfg.max_steps:
            break
        if oracle.remaining < per_step:
            break  # budget exhausted: normal termination

        # (1) artificial inputs from latent noise
        z_g = rng.standard_normal((n, cfg.latent_dim)).astype(np.float32)
        x_g = generator.forward(z_g, "infer")
        # (2) raw noise inputs
        x_s = rng.standard_normal((n, d)).astype(np.float32)
        # (3) query the oracle: generated batch first, then noise batch
        y_g = oracle.query(x_g)
        y_s = oracle.query(x_s)

        if surrogate is None:
            k_classes = y_g.shape[1]
            if not 0 <= target_label < k_classes:
                raise ValueError(f"target label {target_label} outside oracle's "
                                 f"{k_classes} classes")
            surrogate = nn.Model(build_surrogate(d, k_classes), seed=cfg.seed)
            adam_s = nn.AdamState(surrogate, lr=cfg.surrogate_lr,
                                  beta1=cfg.surrogate_beta1,
                                  beta2=cfg.surrogate_beta2, eps=cfg.surrogate_eps)
            combined = nn.CombinedModel(generator, surrogate)
            one_hot = np.zeros((n, k_classes), dtype=np.float32)
            one_hot[:, target_label] = 1.0

        # (4) surrogate losses (inference mode: metrics are deterministic),
        # then one Adam step on the composite boundary-equilibrium loss
        preds_gen = surrogate.forward(x_g, "infer")
        preds_noise = surrogate.forward(x_s, "infer")
        l_gen = nn.cross_entropy(y_g, preds_gen)
        l_noise = nn.cross_entropy(y_s, preds_noise)
        surrogate.train_step_weighted(
            [(x_s, y_s, 1.0), (x_g, y_g, -state.k)], adam_s, rng=rng)

        # (5) equilibrium factor update
        state.k = update_k(state.k, cfg.lambda_k, cfg.gamma_k, l_noise, l_gen)

        # (6) resample latents, train generator through the frozen surrogate
        z_g2 = rng.standard_normal((n, cfg.latent_dim)).astype(np.float32)
        combined.train_step(z_g2, one_hot, adam_g, rng=rng)

        # (7) step metrics + best-checkpoint protocol
        m = m_global(l_noise, l_gen, cfg.gamma_k)
        if cfg.fidelity_probe == "uniform":
            x_probe = rng.uniform(-1.0, 1.0, (cfg.probe_size, d)).astype(np.float32)
            y_probe = oracle.query(x_probe)  # consumes budget
            fid = fidelity(surrogate.forward(x_probe, "infer"), y_probe)
        else:
            fid = fidelity(preds_noise, y_s)
        comb_acc = float((np.argmax(preds_gen, axis=1) == target_label).mean())

        state.step += 1
        hist = state.history
        hist["step"].append(state.step)
        hist["Lnoise"].append(l_noise)
        hist["Lgen"].append(l_gen)
        hist["k"].append(state.k)
        hist["m_global"].append(m)
        hist["fidelity"].append(fid)
        hist["combined_accuracy"].append(comb_acc)
        if m < state.best_m_global:
            state.best_m_global = m
            state.best_step = state.step
            state.best_surrogate_params = surrogate.copy_params()
            state.best_generator_params = generator.copy_params()
        if log and state.step % 100 == 0:
            log(state.step, l_noise, l_gen, state.k, m, fid, comb_acc)

        if (cfg.early_stop
                and max(hist["fidelity"]) >= cfg.stop_fidelity
                and max(hist["combined_accuracy"]) >= cfg.stop_combined
                and state.best_m_global <= cfg.stop_m_global):
            stopped_early = True
            break

    if state.step == 0:
        raise BudgetExhausted(2 * n, oracle.remaining)

    best_s = nn.Model(surrogate.spec, seed=cfg.seed,
                      params=state.best_surrogate_params)
    best_g = nn.Model(generator.spec, seed=cfg.seed + 1,
                      params=state.best_generator_params)
    hist = state.history
    return AttackReport(
        target_label=int(target_label),
        queries_consumed=oracle.consumed,
        steps=state.step,
        final_fidelity=hist["fidelity"][-1],
        best_fidelity=max(hist["fidelity"]),
        final_combined_accuracy=hist["combined_accuracy"][-1],
        best_combined_accuracy=max(hist["combined_accuracy"]),
        best_m_global=state.best_m_global,
        best_step=state.best_step,
        wall_time=time.monotonic() - t0,
        stopped_early=stopped_early,
        config=asdict(cfg),
        history=hist,
        best_surrogate=best_s,
        best_generator=best_g,
    )
