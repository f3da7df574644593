"""Finite-difference verification of the full model gradient.

For each parameter group we compare the taped gradient of the training loss
against central finite differences (step 1e-5) at up to 100 randomly sampled
coordinates; groups smaller than that are checked exhaustively. Relative
error uses |ad - fd| / max(|ad|, |fd|, 1e-5), so coordinates with near-zero
true gradient are effectively held to an absolute tolerance of 1e-9.
"""

import numpy as np

from .model import Model, ModelConfig
from .tensor import record


def tiny_config(n_classes=3, fusion="sum", streams="both", feature_input=False):
    """A full-architecture model small enough for exhaustive-ish FD checks."""
    return ModelConfig(
        n_classes=n_classes,
        d_model=8,
        n_heads=2,
        n_layers=2,
        ffn_hidden=16,
        max_scenes=8,
        mode="large",
        fusion=fusion,
        streams=streams,
        feature_input=feature_input,
        d_spatial=6,
        d_temporal=6,
        spatial_channels=(3, 4, 5),
        temporal_channels=(3, 4, 5),
    )


def make_inputs(config, n_scenes=2, res=16, seed=0):
    """Random O(1) inputs for one video under the given config."""
    rng = np.random.default_rng(seed)
    y = np.zeros(config.n_classes)
    y[: max(1, config.n_classes // 2)] = 1.0
    if config.feature_input:
        s_in = rng.standard_normal((n_scenes, config.d_spatial))
        t_in = rng.standard_normal((n_scenes, config.d_temporal))
    else:
        s_in = rng.random((n_scenes, res, res, 3))
        t_in = rng.random((n_scenes, config.clip_len, res, res, 3))
    return s_in, t_in, y


def check_model_gradients(model: Model, s_in, t_in, y, n_coords=100, step=1e-5, seed=0,
                          group_names=None):
    """Max relative AD-vs-FD error per parameter group.

    Returns an ordered dict name -> (max_rel_err, n_checked).
    """
    with record() as tape:
        loss, _ = model.loss_for_sample(s_in, t_in, y)
    tape.backward(loss)
    ad = {}
    for name, t in model.params.items():
        ad[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        t.zero_grad()

    def loss_value():
        l, _ = model.loss_for_sample(s_in, t_in, y)  # no tape: values only
        return float(l.data)

    rng = np.random.default_rng(seed)
    results = {}
    names = group_names if group_names is not None else list(model.params)
    for name in names:
        flat = model.params[name].data.reshape(-1)
        size = flat.size
        idx = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            a = ad[name].reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-5)
            if rel > worst:
                worst = rel
        results[name] = (worst, len(idx))
    return results


def run_suite(seed=1, n_coords=100, fusion="sum"):
    """Build the tiny full model and FD-check every parameter group."""
    config = tiny_config(fusion=fusion)
    model = Model(config, seed=seed)
    s_in, t_in, y = make_inputs(config, seed=seed)
    return check_model_gradients(model, s_in, t_in, y, n_coords=n_coords, seed=seed)
