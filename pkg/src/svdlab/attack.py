"""Gradient inversion engine.

Given a model and one client's (possibly defended) gradients, the engine
optimizes dummy inputs, and optionally dummy labels, so the gradients they
would produce match the observed ones. The matching loss is differentiated
through the network's own backward pass analytically (second-order ReLU terms
vanish almost everywhere), so no autodiff framework is involved and runs are
bit-deterministic for a fixed seed.

Adaptive modes mirror what an attacker who knows the defense would do:
re-apply a detected prune mask, average away injected noise, or replay the
low-rank defense pipeline on the dummy gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import defense, tinynn
from .errors import InvalidConfig, InvalidInput, UndeterminedLabel
from .tinynn import GradSet, KIND_RELU, ModelParams

DISTANCES = ("l2", "neg_cosine_layerwise")
ADAPTIVE_MODES = ("none", "prune_mask", "eot", "defense_replay")
LABEL_MODES = ("known", "inferred", "optimized")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AttackConfig:
    distance: str = "l2"
    iterations: int = 1000
    lr: float = 0.1
    tv_weight: float = 0.0
    label_mode: str = "known"
    adaptive: str = "none"
    eot_samples: int = 1
    seed: int = 0
    defense: defense.DefenseConfig | None = None  # known to adaptive attackers

    def validate(self) -> list[str]:
        errors = []
        if self.distance not in DISTANCES:
            errors.append(f"attack.distance must be one of {DISTANCES}")
        if self.iterations < 1:
            errors.append("attack.iterations must be >= 1")
        if self.lr <= 0.0:
            errors.append("attack.lr must be > 0")
        if self.tv_weight < 0.0:
            errors.append("attack.tv_weight must be >= 0")
        if self.label_mode not in LABEL_MODES:
            errors.append(f"attack.label_mode must be one of {LABEL_MODES}")
        if self.adaptive not in ADAPTIVE_MODES:
            errors.append(f"attack.adaptive must be one of {ADAPTIVE_MODES}")
        if self.adaptive == "eot" and self.eot_samples < 1:
            errors.append("attack.eot_samples must be >= 1")
        return errors


@dataclass
class AttackResult:
    reconstructed: np.ndarray  # best iterate, first slot, clamped to [0, 1]
    label: int
    loss_trace: np.ndarray  # distance value per iteration
    final_distance: float  # min over the trace
    best_iteration: int
    reconstructed_batch: np.ndarray  # all slots at the best iterate
    warnings: list[str] = field(default_factory=list)


def _flatten_layer(layer: tinynn.LayerGrads) -> np.ndarray:
    return np.concatenate([layer.weight_grad.ravel(), layer.bias_grad.ravel()])


def grad_distance(observed: GradSet, dummy: GradSet, metric: str) -> float:
    """l2: total squared entry difference. neg_cosine_layerwise: per layer,
    1 - cosine of the flattened weight+bias vectors; layers where either side
    has zero norm contribute 0."""
    if metric not in DISTANCES:
        raise InvalidConfig(f"unknown distance metric {metric!r}")
    if len(observed.layers) != len(dummy.layers):
        raise InvalidInput("gradient sets have different layer counts")
    if metric == "l2":
        total = 0.0
        for o, d in zip(observed.layers, dummy.layers):
            total += float(np.sum(np.square(d.weight_grad - o.weight_grad)))
            total += float(np.sum(np.square(d.bias_grad - o.bias_grad)))
        return total
    total = 0.0
    for o, d in zip(observed.layers, dummy.layers):
        ov = _flatten_layer(o)
        dv = _flatten_layer(d)
        no = float(np.linalg.norm(ov))
        nd = float(np.linalg.norm(dv))
        if no == 0.0 or nd == 0.0:
            continue
        total += 1.0 - float(dv @ ov) / (nd * no)
    return total


def _distance_with_sens(observed: GradSet, dummy: GradSet, metric: str):
    """Distance plus its gradient with respect to every dummy tensor."""
    sens = defense.zero_grads_like(dummy)
    if metric == "l2":
        total = 0.0
        for o, d, s in zip(observed.layers, dummy.layers, sens.layers):
            dw = d.weight_grad - o.weight_grad
            db = d.bias_grad - o.bias_grad
            total += float(np.sum(dw * dw)) + float(np.sum(db * db))
            s.weight_grad[...] = 2.0 * dw
            s.bias_grad[...] = 2.0 * db
        return total, sens
    total = 0.0
    for o, d, s in zip(observed.layers, dummy.layers, sens.layers):
        ov = _flatten_layer(o)
        dv = _flatten_layer(d)
        no = float(np.linalg.norm(ov))
        nd = float(np.linalg.norm(dv))
        if no == 0.0 or nd == 0.0:
            continue
        dot = float(dv @ ov)
        total += 1.0 - dot / (nd * no)
        gvec = -ov / (nd * no) + (dot / (nd**3 * no)) * dv
        wsize = d.weight_grad.size
        s.weight_grad[...] = gvec[:wsize].reshape(d.weight_grad.shape)
        s.bias_grad[...] = gvec[wsize:].reshape(d.bias_grad.shape)
    return total, sens


def _replay_projection(g: np.ndarray, cfg: defense.DefenseConfig):
    """Rank-k projector the defense would apply to this matrix.

    Returns (weights, u_k). Uses a library SVD: only the projection subspace
    matters here, and it is unique for distinct singular values.
    """
    weights = defense.channel_weights(g)
    wg = weights[:, None] * g
    u, sig, _ = np.linalg.svd(wg, full_matrices=False)
    if cfg.entropy_source == "unweighted":
        sig_e = np.linalg.svd(g, compute_uv=False)
    else:
        sig_e = sig
    energy = np.square(sig_e)
    tot = float(energy.sum())
    if tot <= 0.0:
        return weights, u[:, :1] * 0.0
    tilde = energy / tot
    nz = tilde[tilde > 0.0]
    entropy = float(-np.sum(nz * np.log(nz)))
    threshold = defense.adaptive_threshold(entropy, cfg.beta)
    fractions = np.cumsum(np.square(sig)) / max(float(np.sum(np.square(sig))), 1e-300)
    k = int(np.searchsorted(fractions, threshold, side="right")) + 1
    k = min(k, len(sig))
    return weights, u[:, :k]


class _AdaptiveTransform:
    """Forward transform of the dummy gradients plus the matching pullback of
    distance sensitivities, per attack iteration."""

    def __init__(self, cfg: AttackConfig, observed: GradSet, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.observed = observed
        if cfg.adaptive == "prune_mask":
            self.masks = [
                (t.weight_grad != 0.0, t.bias_grad != 0.0) for t in observed.layers
            ]
        if cfg.adaptive == "eot":
            d = cfg.defense
            if d is None or d.method not in ("dp_gauss", "dp_lap") or d.noise_scale <= 0.0:
                raise InvalidConfig(
                    "eot needs the defender's noise method and scale in attack.defense"
                )
        if cfg.adaptive == "defense_replay":
            if cfg.defense is None or cfg.defense.method != "svdefense":
                raise InvalidConfig(
                    "defense_replay needs the low-rank defense config in attack.defense"
                )
        self._projectors = None

    def apply(self, dummy: GradSet) -> GradSet:
        mode = self.cfg.adaptive
        if mode == "none":
            return dummy
        if mode == "prune_mask":
            out = dummy.copy()
            for layer, (wm, bm) in zip(out.layers, self.masks):
                layer.weight_grad *= wm
                layer.bias_grad *= bm
            return out
        if mode == "eot":
            d = self.cfg.defense
            n = self.cfg.eot_samples
            out = dummy.copy()
            for layer in out.layers:
                for t in (layer.weight_grad, layer.bias_grad):
                    t += self._mean_noise(d, n, t.shape)
            return out
        # defense_replay: refresh the projector at the current iterate, then
        # push the dummy matrix through it (bias tensors travel raw).
        self._projectors = []
        out = dummy.copy()
        for layer in out.layers:
            g = layer.weight_grad
            if g.ndim == 2 and min(g.shape) >= 2 and np.any(g):
                w, u_k = _replay_projection(g, self.cfg.defense)
                proj = u_k @ u_k.T
                layer.weight_grad = (proj @ (w[:, None] * g)) / w[:, None]
                self._projectors.append((w, proj))
            else:
                self._projectors.append(None)
        return out

    def _mean_noise(self, d: defense.DefenseConfig, n: int, shape) -> np.ndarray:
        if d.method == "dp_gauss":
            draws = self.rng.normal(0.0, d.noise_scale, size=(n, *shape))
        else:
            draws = self.rng.laplace(0.0, d.noise_scale, size=(n, *shape))
        return draws.mean(axis=0)

    def pullback(self, sens: GradSet) -> GradSet:
        mode = self.cfg.adaptive
        if mode in ("none", "eot"):
            return sens
        if mode == "prune_mask":
            out = sens.copy()
            for layer, (wm, bm) in zip(out.layers, self.masks):
                layer.weight_grad *= wm
                layer.bias_grad *= bm
            return out
        out = sens.copy()
        for layer, pr in zip(out.layers, self._projectors):
            if pr is not None:
                w, proj = pr
                layer.weight_grad = w[:, None] * (proj @ (layer.weight_grad / w[:, None]))
        return out


def _input_label_grads(params: ModelParams, x, y, sens: GradSet):
    """Differentiate an attack loss through the gradient computation.

    `sens` holds dE/d(gradient tensor) for every layer; the return value is
    (dE/dx, dE/dy) where x is the (n, D) dummy batch and y the (n, C) soft
    targets. The forward/backward caches are rebuilt here because the caller
    may have transformed the gradients in between.
    """
    n = x.shape[0]
    logits, acts, preacts = tinynn.forward_batch(params, x)
    probs = tinynn._softmax(logits)
    deltas = tinynn.deltas_from_forward(params, preacts, probs, y)
    n_layers = len(params.layers)

    # sensitivities of the per-example error signals, built from the first
    # layer upward because delta_l feeds delta_{l-1} in the backward pass
    d_delta = []
    for l in range(n_layers):
        direct = (acts[l] @ sens.layers[l].weight_grad.T + sens.layers[l].bias_grad) / n
        if l > 0:
            prev = d_delta[l - 1]
            if params.layers[l - 1].kind == KIND_RELU:
                prev = prev * (preacts[l - 1] > 0.0)
            direct = direct + prev @ params.layers[l].weight.T
        d_delta.append(direct)

    # softmax head: delta_L = probs - y
    d_probs = d_delta[-1]
    dy = -d_delta[-1]
    row = np.sum(probs * d_probs, axis=1, keepdims=True)
    d_z = probs * (d_probs - row)

    # walk the forward chain back down to the input
    for l in range(n_layers - 1, -1, -1):
        d_act = d_z @ params.layers[l].weight + (deltas[l] @ sens.layers[l].weight_grad) / n
        if l == 0:
            return d_act, dy
        if params.layers[l - 1].kind == KIND_RELU:
            d_z = d_act * (preacts[l - 1] > 0.0)
        else:
            d_z = d_act


def _dummy_grads(params: ModelParams, x, y):
    logits, acts, preacts = tinynn.forward_batch(params, x)
    probs = tinynn._softmax(logits)
    deltas = tinynn.deltas_from_forward(params, preacts, probs, y)
    return tinynn.grads_from_deltas(acts, deltas, x.shape[0])


def _tv_value_grad(x: np.ndarray, side: int):
    """Anisotropic total variation of each image slot and its subgradient."""
    imgs = x.reshape(x.shape[0], side, side)
    dh = imgs[:, :, 1:] - imgs[:, :, :-1]
    dv = imgs[:, 1:, :] - imgs[:, :-1, :]
    value = float(np.sum(np.abs(dh)) + np.sum(np.abs(dv)))
    grad = np.zeros_like(imgs)
    sh = np.sign(dh)
    sv = np.sign(dv)
    grad[:, :, 1:] += sh
    grad[:, :, :-1] -= sh
    grad[:, 1:, :] += sv
    grad[:, :-1, :] -= sv
    return value, grad.reshape(x.shape)


def _as_gradset(observed, params: ModelParams) -> GradSet:
    if isinstance(observed, GradSet):
        return observed
    gs = defense.packets_to_gradset(list(observed))
    if len(gs.layers) != len(params.layers):
        raise InvalidInput("observed packets do not match the model's layer count")
    return gs


def run_attack(
    params: ModelParams,
    observed,
    target_shape,
    cfg: AttackConfig,
    labels=None,
    init: np.ndarray | None = None,
) -> AttackResult:
    """Reconstruct the input(s) behind `observed` gradients.

    `observed` may be a GradSet or a list of defense packets (which are
    reassembled the same way the server does). `target_shape` is (D,) for a
    single input or (B, D) for a joint batch reconstruction; `labels` must be
    given in 'known' mode (an int, or one int per slot). The best iterate by
    distance is returned, with inputs clamped to [0, 1] after every step.
    """
    errors = cfg.validate()
    if errors:
        raise InvalidConfig("; ".join(errors))
    observed = _as_gradset(observed, params)

    shape = tuple(target_shape)
    if len(shape) == 1:
        batch, dim = 1, shape[0]
    elif len(shape) == 2:
        batch, dim = shape
    else:
        raise InvalidInput(f"target_shape must be (D,) or (B, D), got {shape}")
    if dim != params.input_dim:
        raise InvalidInput("target dim does not match the model input dim")

    num_classes = params.num_classes
    warnings: list[str] = []
    label_mode = cfg.label_mode

    label_vec = None
    if label_mode == "known":
        if labels is None:
            raise InvalidConfig("label_mode 'known' requires labels")
        label_vec = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if label_vec.shape != (batch,):
            raise InvalidConfig(f"need one label per slot, got {label_vec.shape}")
    elif label_mode == "inferred":
        if batch != 1:
            raise InvalidConfig("label inference works on single-example gradients")
        try:
            label_vec = np.array([tinynn.infer_label_from_grads(observed)])
        except UndeterminedLabel as exc:
            warnings.append(f"label inference failed ({exc}); optimizing labels instead")
            label_mode = "optimized"

    rng = np.random.default_rng(cfg.seed)
    if init is None:
        x = rng.uniform(0.0, 1.0, size=(batch, dim))
    else:
        x = np.clip(np.asarray(init, dtype=np.float64).reshape(batch, dim), 0.0, 1.0)
    label_logits = np.zeros((batch, num_classes))
    optimize_labels = label_mode == "optimized"

    transform = _AdaptiveTransform(cfg, observed, np.random.default_rng(cfg.seed + 1))

    m_x = np.zeros_like(x)
    v_x = np.zeros_like(x)
    m_l = np.zeros_like(label_logits)
    v_l = np.zeros_like(label_logits)

    side = int(round(np.sqrt(dim)))
    use_tv = cfg.tv_weight > 0.0 and side * side == dim

    trace = np.empty(cfg.iterations)
    best = (np.inf, 0, x.copy(), label_logits.copy())

    for it in range(cfg.iterations):
        if optimize_labels:
            y = tinynn._softmax(label_logits)
        else:
            y = np.zeros((batch, num_classes))
            y[np.arange(batch), label_vec] = 1.0

        dummy = _dummy_grads(params, x, y)
        transformed = transform.apply(dummy)
        dist, sens = _distance_with_sens(observed, transformed, cfg.distance)
        loss = dist
        if use_tv:
            tv_val, tv_grad = _tv_value_grad(x, side)
            loss = loss + cfg.tv_weight * tv_val

        trace[it] = loss
        if loss < best[0]:
            best = (loss, it, x.copy(), label_logits.copy())

        sens = transform.pullback(sens)
        gx, gy = _input_label_grads(params, x, y, sens)
        if use_tv:
            gx = gx + cfg.tv_weight * tv_grad

        t = it + 1
        m_x = ADAM_BETA1 * m_x + (1 - ADAM_BETA1) * gx
        v_x = ADAM_BETA2 * v_x + (1 - ADAM_BETA2) * gx * gx
        x = x - cfg.lr * (m_x / (1 - ADAM_BETA1**t)) / (
            np.sqrt(v_x / (1 - ADAM_BETA2**t)) + ADAM_EPS
        )
        np.clip(x, 0.0, 1.0, out=x)

        if optimize_labels:
            row = np.sum(y * gy, axis=1, keepdims=True)
            gl = y * (gy - row)
            m_l = ADAM_BETA1 * m_l + (1 - ADAM_BETA1) * gl
            v_l = ADAM_BETA2 * v_l + (1 - ADAM_BETA2) * gl * gl
            label_logits = label_logits - cfg.lr * (m_l / (1 - ADAM_BETA1**t)) / (
                np.sqrt(v_l / (1 - ADAM_BETA2**t)) + ADAM_EPS
            )

    _, best_it, best_x, best_logits = best
    if optimize_labels:
        final_label = int(np.argmax(best_logits[0]))
    else:
        final_label = int(label_vec[0])
    return AttackResult(
        reconstructed=best_x[0].copy(),
        label=final_label,
        loss_trace=trace,
        final_distance=float(np.min(trace)),
        best_iteration=best_it,
        reconstructed_batch=best_x,
        warnings=warnings,
    )


def write_pgm(image: np.ndarray, side: int, path) -> None:
    """Plain-text P2 dump of one [0, 1] image for eyeballing."""
    img = np.asarray(image, dtype=np.float64).reshape(side, side)
    levels = np.clip(np.rint(img * 255.0), 0, 255).astype(int)
    lines = ["P2", f"{side} {side}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in levels)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_image_csv(truth: np.ndarray, recon: np.ndarray, side: int, path) -> None:
    """Ground-truth and reconstructed pixel grids, stacked, as CSV."""
    with open(path, "w") as fh:
        fh.write("# truth rows, then reconstruction rows\n")
        for block in (truth, recon):
            for row in np.asarray(block).reshape(side, side):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
