"""Round-based federated averaging with pluggable gradient defenses.

Clients train on private shards of a synthetic dataset, defend their
accumulated update (global minus local parameters), and ship per-tensor
packets. The server reassembles the packets, weights clients per tensor, and
applies the aggregated update. Everything is seed-deterministic: client
sampling, local batch order, and any defense randomness derive from the
experiment seed through fixed-purpose seed sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import defense as defense_mod
from . import tinynn
from .errors import InvalidConfig, InvalidInput
from .tinynn import GradSet, LayerGrads, ModelParams

# seed-sequence purpose tags
_TAG_TRAIN_DATA = 0
_TAG_TEST_DATA = 1
_TAG_MODEL = 2
_TAG_PARTITION = 3
_TAG_SAMPLING = 4
_TAG_CLIENT_BATCHES = 5
_TAG_DEFENSE_NOISE = 6


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 4
    per_class: int = 40
    per_class_test: int = 10
    side: int = 8
    # optional external dataset (IDX image/label pair) instead of synthetic
    idx_images: str | None = None
    idx_labels: str | None = None

    def validate(self) -> list[str]:
        errors = []
        if self.num_classes < 2:
            errors.append("data.num_classes must be >= 2")
        if self.per_class < 1 or self.per_class_test < 1:
            errors.append("data.per_class and data.per_class_test must be >= 1")
        if self.side < 4:
            errors.append("data.side must be >= 4")
        if (self.idx_images is None) != (self.idx_labels is None):
            errors.append("data.idx_images and data.idx_labels must be set together")
        return errors


@dataclass(frozen=True)
class FlConfig:
    num_clients: int = 8
    clients_per_round: int = 4
    rounds: int = 10
    local_epochs: int = 1
    local_batch_size: int = 8
    local_lr: float = 0.5
    partition_scheme: str = "dirichlet"  # dirichlet | rho
    dirichlet_alpha: float = 0.5
    rho: float = 1.0
    defense: defense_mod.DefenseConfig = field(default_factory=defense_mod.DefenseConfig)
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.num_clients < 1:
            errors.append("fl.num_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            errors.append("fl.clients_per_round must be in [1, num_clients]")
        if self.rounds < 1:
            errors.append("fl.rounds must be >= 1")
        if self.local_epochs < 1 or self.local_batch_size < 1:
            errors.append("fl.local_epochs and fl.local_batch_size must be >= 1")
        if self.local_lr <= 0.0:
            errors.append("fl.local_lr must be > 0")
        if self.partition_scheme not in ("dirichlet", "rho"):
            errors.append("fl.partition_scheme must be 'dirichlet' or 'rho'")
        if self.dirichlet_alpha <= 0.0:
            errors.append("fl.dirichlet_alpha must be > 0")
        if not 0.0 < self.rho <= 1.0:
            errors.append("fl.rho must be in (0, 1]")
        errors.extend(self.defense.validate())
        return errors


@dataclass
class ClientUpdate:
    client_id: int
    sample_count: int
    packets: list[defense_mod.DefensePacket]


@dataclass
class RoundReport:
    round_index: int
    accuracy: float
    mean_entropy: float
    bytes_up: int
    bytes_down: int
    client_entropies: dict
    aggregation_weights: dict
    selected_clients: list[int]


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def model_bytes(params: ModelParams) -> int:
    """Broadcast payload size: every parameter as f64."""
    return 8 * params.num_params()


def client_round(
    global_params: ModelParams,
    ds: data_mod.Dataset,
    shard: list[int],
    cfg: FlConfig,
    client_id: int,
    round_index: int,
    dgp_residual: GradSet | None = None,
):
    """One client's local training plus defense.

    The uploaded quantity is the accumulated update (global minus trained
    local parameters); with one epoch, one batch covering the shard, it
    equals lr times the raw gradient. Returns (ClientUpdate, new_residual).
    """
    if not shard:
        raise InvalidInput("client shard is empty")
    local = global_params.copy()
    batch_rng = _rng(cfg.seed, _TAG_CLIENT_BATCHES, round_index, client_id)
    for _ in range(cfg.local_epochs):
        order = batch_rng.permutation(len(shard))
        for start in range(0, len(shard), cfg.local_batch_size):
            chunk = order[start : start + cfg.local_batch_size]
            batch = [ds.examples[shard[i]] for i in chunk]
            _, grads = tinynn.loss_and_grad(local, batch)
            local = tinynn.sgd_step(local, grads, cfg.local_lr)

    update = GradSet(
        [
            LayerGrads(
                weight_grad=g.weight - l.weight,
                bias_grad=g.bias - l.bias,
            )
            for g, l in zip(global_params.layers, local.layers)
        ]
    )
    noise_rng = _rng(cfg.seed, _TAG_DEFENSE_NOISE, round_index, client_id)
    packets, new_residual = defense_mod.defend_update(
        update, cfg.defense, rng=noise_rng, residual=dgp_residual
    )
    return ClientUpdate(client_id, len(shard), packets), new_residual


def aggregation_weights(updates: list[ClientUpdate], tensor_id: int) -> np.ndarray:
    """Per-client weights for one tensor, summing to 1.

    Factorized tensors weight clients by entropy times sample count; if every
    entropy is zero the rule falls back to sample counts, which is also what
    raw tensors (biases, undefended runs) use.
    """
    if not updates:
        raise InvalidInput("no updates to aggregate")
    packets = [u.packets[tensor_id] for u in updates]
    counts = np.array([float(u.sample_count) for u in updates])
    kinds = {p.kind for p in packets}
    if len(kinds) != 1:
        raise InvalidInput(f"mixed packet kinds for tensor {tensor_id}")
    if kinds == {defense_mod.KIND_SVD}:
        entropies = np.array([p.entropy for p in packets])
        mass = entropies * counts
        if mass.sum() > 0.0:
            return mass / mass.sum()
    return counts / counts.sum()


def aggregate(global_params: ModelParams, updates: list[ClientUpdate]) -> ModelParams:
    """Weighted per-tensor sum of reconstructed updates, subtracted from the
    global parameters. Clients are folded in ascending id order so the
    floating-point result does not depend on arrival order."""
    updates = sorted(updates, key=lambda u: u.client_id)
    n_tensors = len(updates[0].packets)
    if any(len(u.packets) != n_tensors for u in updates):
        raise InvalidInput("updates disagree on tensor count")
    new_layers = []
    for l, layer in enumerate(global_params.layers):
        agg = {}
        for tensor_id, ref in ((2 * l, layer.weight), (2 * l + 1, layer.bias)):
            weights = aggregation_weights(updates, tensor_id)
            total = np.zeros_like(ref)
            for w, u in zip(weights, updates):
                rec = defense_mod.reconstruct_packet(u.packets[tensor_id])
                if rec.shape != ref.shape:
                    raise InvalidInput(
                        f"tensor {tensor_id} shape {rec.shape} != model {ref.shape}"
                    )
                total += w * rec
            agg[tensor_id] = total
        new_layers.append(
            tinynn.LayerParams(
                weight=layer.weight - agg[2 * l],
                bias=layer.bias - agg[2 * l + 1],
                kind=layer.kind,
            )
        )
    return ModelParams(new_layers)


def _split_idx_dataset(ds: data_mod.Dataset, per_class_test: int):
    """Hold out the first per_class_test examples of each class for testing."""
    taken = {c: 0 for c in range(ds.num_classes)}
    test_examples, train_examples = [], []
    for ex in ds.examples:
        if taken[ex.label] < per_class_test:
            taken[ex.label] += 1
            test_examples.append(ex)
        else:
            train_examples.append(ex)
    if not train_examples or not test_examples:
        raise InvalidConfig("IDX dataset too small for the requested test split")
    train = data_mod.Dataset(train_examples, ds.num_classes, ds.input_dim, ds.side)
    test = data_mod.Dataset(test_examples, ds.num_classes, ds.input_dim, ds.side)
    return train, test


def build_experiment(fl: FlConfig, data_cfg: DataConfig, hidden_dims=(32,)):
    """Deterministic dataset / partition / model setup shared by the CLI and
    tests. Returns (train_ds, test_ds, partition, model)."""
    if data_cfg.idx_images is not None:
        loaded = data_mod.load_idx(data_cfg.idx_images, data_cfg.idx_labels)
        train, test = _split_idx_dataset(loaded, data_cfg.per_class_test)
        data_cfg = DataConfig(
            num_classes=loaded.num_classes,
            per_class=data_cfg.per_class,
            per_class_test=data_cfg.per_class_test,
            side=loaded.side,
        )
    else:
        train_seed = int(_rng(fl.seed, _TAG_TRAIN_DATA).integers(2**31))
        test_seed = int(_rng(fl.seed, _TAG_TEST_DATA).integers(2**31))
        train = data_mod.make_synthetic(
            data_cfg.num_classes, data_cfg.per_class, data_cfg.side, seed=train_seed
        )
        test = data_mod.make_synthetic(
            data_cfg.num_classes, data_cfg.per_class_test, data_cfg.side, seed=test_seed
        )
    part_seed = int(_rng(fl.seed, _TAG_PARTITION).integers(2**31))
    if fl.partition_scheme == "dirichlet":
        part = data_mod.partition_dirichlet(train, fl.num_clients, fl.dirichlet_alpha, part_seed)
    else:
        part = data_mod.partition_rho_clients(train, fl.num_clients, fl.rho, part_seed)
    model_seed = np.random.SeedSequence([fl.seed, _TAG_MODEL])
    model = tinynn.init_model(
        data_cfg.side**2, list(hidden_dims), data_cfg.num_classes, seed=model_seed
    )
    return train, test, part, model


def run_experiment(fl: FlConfig, data_cfg: DataConfig, hidden_dims=(32,)):
    """Full training run. Returns (reports, final_model)."""
    errors = fl.validate() + data_cfg.validate()
    if errors:
        raise InvalidConfig("; ".join(errors))
    train, test, part, model = build_experiment(fl, data_cfg, hidden_dims)
    download_unit = model_bytes(model)
    dgp_residuals: dict[int, GradSet] = {}
    reports = []
    for rnd in range(fl.rounds):
        sampler = _rng(fl.seed, _TAG_SAMPLING, rnd)
        selected = sorted(
            int(c)
            for c in sampler.choice(fl.num_clients, size=fl.clients_per_round, replace=False)
        )
        updates = []
        bytes_up = 0
        client_entropies = {}
        for cid in selected:
            update, new_residual = client_round(
                model, train, part.client_shards[cid], fl, cid, rnd,
                dgp_residuals.get(cid),
            )
            if new_residual is not None:
                dgp_residuals[cid] = new_residual
            updates.append(update)
            bytes_up += sum(defense_mod.packet_bytes(p) for p in update.packets)
            svd_entropies = [
                p.entropy for p in update.packets if p.kind == defense_mod.KIND_SVD
            ]
            client_entropies[cid] = (
                float(np.mean(svd_entropies)) if svd_entropies else 0.0
            )
        agg_weights = {
            tid: aggregation_weights(updates, tid).tolist()
            for tid in range(len(updates[0].packets))
        }
        model = aggregate(model, updates)
        reports.append(
            RoundReport(
                round_index=rnd,
                accuracy=tinynn.accuracy(model, test.examples),
                mean_entropy=float(np.mean(list(client_entropies.values()))),
                bytes_up=bytes_up,
                bytes_down=download_unit * len(selected),
                client_entropies=client_entropies,
                aggregation_weights=agg_weights,
                selected_clients=selected,
            )
        )
    return reports, model


def raw_upload_bytes(params: ModelParams) -> int:
    """Upload size of one undefended update (raw packets for every tensor);
    the defense-off baseline for communication accounting."""
    total = 0
    for l, layer in enumerate(params.layers):
        for tid, t in ((2 * l, layer.weight), (2 * l + 1, layer.bias)):
            pkt = defense_mod.DefensePacket(
                layer_id=tid, kind=defense_mod.KIND_RAW, orig_shape=t.shape,
                values=t.ravel(),
            )
            total += defense_mod.packet_bytes(pkt)
    return total
