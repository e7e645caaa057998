"""Shared finite-difference gradient checking helpers.

Used by the focused gradient tests and by the acceptance suite.  All
checks run on a tiny double-precision learner (8x8 images, T=6, d=8,
g=2) so exhaustive-ish probing stays fast.
"""

import numpy as np
import torch

from colorshot.echelon import EchelonConfig
from colorshot.engine import _episode_losses, _labels_tensors
from colorshot.episodes import EpisodeSpec, synth_episode
from colorshot.learner import LearnerConfig, build_learner
from colorshot.objective import total_loss

SPEC = EpisodeSpec(ways=2, shots=1, queries=2, image_size=(8, 8), seed=0)
H = 1e-5
REL_TOL = 1e-3
# Below this absolute difference the central difference is dominated by
# cancellation noise (loss is O(10), double precision, step 1e-5).
ABS_FLOOR = 1e-9

PARAMETER_GROUPS = {
    "echelon": "echelon.branches",
    "attention": "echelon.attention",
    "projection": "echelon.projection",
    "sim_metric": ("patterns.generations.0.metrics", "patterns.generations.1.metrics"),
    "fusion": (
        "patterns.generations.0.core_fusion",
        "patterns.generations.1.core_fusion",
        "patterns.generations.0.aux_transforms",
        "patterns.generations.1.aux_transforms",
    ),
}


def tiny_model(attention=True, seed=0):
    config = LearnerConfig(
        echelon=EchelonConfig(
            stage_widths=(4, 8, 8, 8), embed_dim=8,
            attention_dim=4, attention_enabled=attention,
        ),
        pattern_depth=2,
        metric_hidden=8,
    )
    model = build_learner(config, seed).double()
    # Move every parameter off its exact init (zeros sit on kinks).
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    model.train()
    return model


def fixture_episode(seed=0):
    return synth_episode(SPEC, palette_separation=0.5, noise=0.1,
                         rng=np.random.default_rng(seed))


def loss_fn(model, episode):
    support, query = _labels_tensors(episode)
    per_gen, _ = _episode_losses(model, episode, SPEC, support, query)
    return total_loss([per_gen])


def check_parameter(model, name, param, episode, grad, rng):
    numel = param.numel()
    if numel <= 64:
        indices = np.arange(numel)
    else:
        indices = rng.choice(numel, size=16, replace=False)
    flat = param.detach().view(-1)
    failures = []
    for idx in indices:
        idx = int(idx)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + H
        plus = loss_fn(model, episode).item()
        with torch.no_grad():
            flat[idx] = orig - H
        minus = loss_fn(model, episode).item()
        with torch.no_grad():
            flat[idx] = orig
        fd = (plus - minus) / (2 * H)
        an = grad.view(-1)[idx].item()
        scale = max(abs(fd), abs(an))
        if abs(fd - an) > max(REL_TOL * scale, ABS_FLOOR):
            failures.append((name, idx, fd, an, abs(fd - an) / max(scale, 1e-300)))
    return failures


def run_group_check(model, episode, prefixes):
    if isinstance(prefixes, str):
        prefixes = (prefixes,)
    model.zero_grad()
    loss = loss_fn(model, episode)
    loss.backward()
    # A missing grad is a structural zero (the final generation's auxiliary
    # updates feed no loss); finite differences must agree it is zero.
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    rng = np.random.default_rng(17)
    failures = []
    checked = 0
    for name, param in model.named_parameters():
        if not name.startswith(tuple(prefixes)):
            continue
        checked += 1
        failures += check_parameter(model, name, param, episode, grads[name], rng)
    assert checked > 0, f"no parameters matched prefixes {prefixes!r}"
    return failures
