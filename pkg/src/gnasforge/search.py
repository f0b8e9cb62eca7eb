"""Bi-level dual-optimization search, genotype derivation, retraining, grid search."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, ParameterStore, glorot
from .optim import Adam
from .blocks import (
    BlockSpace, BlockChoice, BlockParamsView, block_forward, init_block_params,
    SUB_BLOCKS, EXPANSIONS, ATTENTIONS, HEAD_COUNTS, AGGREGATORS, ACTIVATION_KINDS,
)
from .controller import Controller, add_noise, extract_indices
from .router import Router, TempSchedule, temp_anneal


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    num_layers: int = 2
    hidden_grid: tuple = (64, 128, 256, 512)
    max_iter: int = 400
    train_step: int = 10
    lr_w: float = 0.005
    weight_decay_w: float = 5e-4
    lr_a: float = 0.002
    weight_decay_a: float = 1e-8
    schedule_kind: str = "exp"
    alpha: float = 1.0
    e_start: int = 80
    e_cos: int = 100
    e_exp: int = 300
    seed: int = 0
    router_enabled: bool = True
    expansions: tuple = EXPANSIONS
    attentions: tuple = ATTENTIONS
    head_counts: tuple = HEAD_COUNTS
    aggregators: tuple = AGGREGATORS
    activations: tuple = ACTIVATION_KINDS
    freeze_layers: tuple = ()
    retrain_epochs: int = 300
    patience: int = 50

    def __post_init__(self):
        if self.max_iter < 1 or self.train_step < 1:
            raise ValueError("max_iter and train_step must be >= 1")
        if not 2 <= self.num_layers <= 7:
            raise ValueError("num_layers must be in [2, 7]")
        for h in self.hidden_grid:
            if h % 16:
                raise ValueError(f"hidden size {h} is not a multiple of 16")

    def schedule(self):
        return TempSchedule(kind=self.schedule_kind, alpha=self.alpha,
                            e_start=self.e_start, e_max=self.max_iter,
                            e_cos=self.e_cos, e_exp=self.e_exp)

    def spaces(self, feat_dim, hidden):
        return [
            BlockSpace(layer=l,
                       in_dim=feat_dim if l == 0 else hidden,
                       out_dim=hidden,
                       expansions=tuple(self.expansions),
                       attentions=tuple(self.attentions),
                       head_counts=tuple(self.head_counts),
                       aggregators=tuple(self.aggregators),
                       activations=tuple(self.activations))
            for l in range(self.num_layers)
        ]


# -- losses and metrics ---------------------------------------------------------

def compute_loss(logits, labels, mask, task):
    """Scalar training objective: cross-entropy (single) or elementwise BCE (multi)."""
    if task == "single":
        return T.softmax_cross_entropy(logits, labels, mask)
    if task == "multi":
        return T.sigmoid_bce(logits, labels, mask)
    raise ValueError(f"unknown task {task!r}")


def evaluate(logits, labels, mask, task):
    """Accuracy (single-label) or micro-F1 (multi-label, threshold 0.5) on a mask."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluate: empty mask")
    if task == "single":
        pred = logits[mask].argmax(axis=-1)
        return float((pred == np.asarray(labels)[mask]).mean())
    if task == "multi":
        pred = logits[mask] > 0.0   # sigmoid(x) > 0.5  <=>  x > 0
        true = np.asarray(labels)[mask] > 0.5
        tp = int((pred & true).sum())
        fp = int((pred & ~true).sum())
        fn = int((~pred & true).sum())
        if tp == 0 and fp == 0 and fn == 0:
            return 1.0   # no positives anywhere: vacuously perfect
        return 2.0 * tp / (2.0 * tp + fp + fn)
    raise ValueError(f"unknown task {task!r}")


# -- genotype ---------------------------------------------------------------------

@dataclass
class Genotype:
    """Discrete architecture: per-layer operator choices plus binary shortcuts."""
    layers: list                  # list[BlockChoice]
    routing: list                 # list[(i, j)]
    hidden_sizes: list
    seed: int

    def to_dict(self):
        return {
            "layers": [
                {"expansion": c.expansion, "attention": c.attention, "heads": c.heads,
                 "aggregate": c.aggregate, "activation": c.activation}
                for c in self.layers
            ],
            "routing": [list(p) for p in self.routing],
            "hidden_sizes": list(self.hidden_sizes),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc):
        layers = [BlockChoice(**rec) for rec in doc["layers"]]
        routing = [tuple(p) for p in doc["routing"]]
        L = len(layers)
        for (i, j) in routing:
            if not 0 <= i <= j < L:
                raise ValueError(f"invalid routing pair ({i}, {j}) for {L} layers")
        return cls(layers=layers, routing=routing,
                   hidden_sizes=list(doc["hidden_sizes"]), seed=int(doc["seed"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# -- supernet ----------------------------------------------------------------------

class Supernet:
    """All candidate operators plus controller, router and classifier in one store."""

    def __init__(self, config, feat_dim, num_classes, hidden, seed):
        rng = np.random.default_rng(seed)
        self.config = config
        self.hidden = hidden
        self.num_classes = num_classes
        self.spaces = config.spaces(feat_dim, hidden)
        self.store = ParameterStore()
        for space in self.spaces:
            init_block_params(space, self.store, rng)
        self.views = [BlockParamsView(s, self.store) for s in self.spaces]
        self.classifier = self.store.add("classifier/W", glorot(rng, num_classes, hidden))
        head_sizes = {(s.layer, kind): len(s.candidates(kind))
                      for s in self.spaces for kind in SUB_BLOCKS}
        self.controller = Controller(self.store, head_sizes, rng)
        self.router = None
        if config.router_enabled:
            in_dims = [s.in_dim for s in self.spaces]
            out_dims = [s.out_dim for s in self.spaces]
            self.router = Router(self.store, in_dims, out_dims, rng)

    def choices_from_indices(self, indices):
        return [
            BlockChoice(**{kind: s.candidates(kind)[indices[(s.layer, kind)]]
                           for kind in SUB_BLOCKS})
            for s in self.spaces
        ]

    def scales_from_probs(self, probs, indices):
        """Per-layer {sub-block kind: P^g[Index] scalar Tensor}."""
        return [
            {kind: T.pick(probs[(s.layer, kind)], indices[(s.layer, kind)])
             for kind in SUB_BLOCKS}
            for s in self.spaces
        ]

    def forward(self, graph, choices, scales=None, gate_mode="sampled",
                tau=1.0, gate_noise=None, rng=None):
        """Single-path supernet forward to classifier logits."""
        if self.router is not None and gate_mode == "sampled" and gate_noise is None:
            gate_noise = self.router.sample_noise(rng)
        x = Tensor(graph.features)
        inputs = []
        for j, (view, choice) in enumerate(zip(self.views, choices)):
            inputs.append(x)
            out = block_forward(graph, x, choice,
                                view, scales[j] if scales is not None else None)
            if self.router is not None:
                out = self.router.route_step(j, inputs, out, tau,
                                             mode=gate_mode, noise=gate_noise)
            x = out
        return T.matmul(x, _t(self.classifier))

    def w_param_names(self, freeze_layers=()):
        frozen_prefixes = tuple(f"layer{l}/" for l in freeze_layers)
        return [n for n in self.store.names("w") if not n.startswith(frozen_prefixes)]

    def derive_genotype(self):
        pbar = self.controller.forward()
        indices = extract_indices(pbar)
        routing = self.router.derive_binary_routing() if self.router is not None else []
        return Genotype(layers=self.choices_from_indices(indices), routing=routing,
                        hidden_sizes=[self.hidden] * len(self.spaces),
                        seed=self.config.seed)


def _t(w):
    out = Tensor(w.data.T, _parents=(w,))

    def bw(g):
        if w.requires_grad:
            if w.grad is None:
                w.grad = np.zeros_like(w.data)
            w.grad += g.T

    out._backward = bw
    return out


# -- standalone genotype network ------------------------------------------------------

class GenotypeNet:
    """Network containing only a genotype's chosen operators and binary shortcuts.

    Built from the Genotype alone: no controller, no gate priors. Parameter
    names match the supernet's, so ``copy_weights_from`` can transplant the
    selected slice of a supernet for equivalence checks.
    """

    def __init__(self, genotype, feat_dim, num_classes, seed=0):
        rng = np.random.default_rng(seed)
        self.genotype = genotype
        self.num_classes = num_classes
        hidden = genotype.hidden_sizes
        self.spaces = [
            BlockSpace(layer=l,
                       in_dim=feat_dim if l == 0 else hidden[l - 1],
                       out_dim=hidden[l],
                       expansions=(c.expansion,), attentions=(c.attention,),
                       head_counts=(c.heads,), aggregators=(c.aggregate,),
                       activations=(c.activation,))
            for l, c in enumerate(genotype.layers)
        ]
        self.store = ParameterStore()
        for space in self.spaces:
            init_block_params(space, self.store, rng)
        self.views = [BlockParamsView(s, self.store) for s in self.spaces]
        for (i, j) in genotype.routing:
            self.store.add(f"router/shortcut/{i}_{j}/W",
                           glorot(rng, self.spaces[j].out_dim, self.spaces[i].in_dim))
        self.classifier = self.store.add("classifier/W",
                                         glorot(rng, num_classes, hidden[-1]))

    def copy_weights_from(self, store):
        for name in self.store.names():
            self.store[name].data = store[name].data.copy()

    def forward(self, graph):
        x = Tensor(graph.features)
        inputs = []
        shortcuts = {}
        for (i, j) in self.genotype.routing:
            shortcuts.setdefault(j, []).append(i)
        for j, (view, choice) in enumerate(zip(self.views, self.genotype.layers)):
            inputs.append(x)
            out = block_forward(graph, x, choice, view)
            for i in shortcuts.get(j, ()):
                w = self.store[f"router/shortcut/{i}_{j}/W"]
                out = out + T.matmul(inputs[i], _t(w))
            x = out
        return T.matmul(x, _t(self.classifier))

    def w_param_names(self, freeze_layers=()):
        frozen_prefixes = tuple(f"layer{l}/" for l in freeze_layers)
        return [n for n in self.store.names("w") if not n.startswith(frozen_prefixes)]


# -- dual search -------------------------------------------------------------------

@dataclass
class SearchResult:
    genotype: Genotype
    log: list
    supernet: Supernet
    counters: dict = field(default_factory=dict)

    @property
    def final_val_metric(self):
        return self.log[-1]["val_metric"]

    def write_log(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _finite_or_raise(loss, epoch, name):
    if not np.isfinite(loss.data).all():
        raise SearchError(f"non-finite {name} at epoch {epoch}")


def dual_search(config, graph, hidden=None, seed=None):
    """Alternating weight / architecture optimization over the supernet.

    Per epoch: anneal tau, sample controller noise once, fix the argmax
    operator indices, run ``train_step`` weight updates on the training
    loss, then one a_micro and one a_macro update from a single validation
    backward pass. Bit-deterministic for a fixed seed.
    """
    if not graph.masks:
        raise SearchError("dual_search requires a graph with masks")
    hidden = config.hidden_grid[0] if hidden is None else hidden
    seed = config.seed if seed is None else seed
    task = graph.spec.task
    model = Supernet(config, graph.spec.feature_dim, graph.spec.num_classes, hidden, seed)
    store = model.store
    sched = config.schedule()
    rng = np.random.default_rng(seed + 0x5EED)

    w_names = model.w_param_names(config.freeze_layers)
    opt_w = Adam(store, w_names, config.lr_w, config.weight_decay_w)
    opt_micro = Adam(store, store.names("a_micro"), config.lr_a, config.weight_decay_a)
    opt_macro = None
    if model.router is not None:
        opt_macro = Adam(store, store.names("a_macro"), config.lr_a, config.weight_decay_a)

    counters = {"w_updates": 0, "a_micro_updates": 0, "a_macro_updates": 0}
    log = []
    for epoch in range(config.max_iter):
        tau = temp_anneal(epoch, sched)
        noise = {key: rng.random(model.controller.proj[key].data.shape[1])
                 for key in sorted(model.controller.proj)}

        pbar = model.controller.forward()
        pg = _apply_noise(pbar, tau, noise)
        indices = extract_indices(pg)
        choices = model.choices_from_indices(indices)

        train_loss = None
        for _ in range(config.train_step):
            store.zero_grad()
            logits = model.forward(graph, choices, scales=None,
                                   gate_mode="sampled", tau=tau, rng=rng)
            loss = compute_loss(logits, graph.labels, graph.masks["train"], task)
            _finite_or_raise(loss, epoch, "training loss")
            loss.backward()
            opt_w.step(store.grads("w"))
            counters["w_updates"] += 1
            train_loss = loss.item()

        # architecture update: rebuild the controller tape with the same noise
        store.zero_grad()
        pbar_t = model.controller.forward()
        pg_t = _apply_noise(pbar_t, tau, noise)
        scales = model.scales_from_probs(pg_t, indices)
        logits = model.forward(graph, choices, scales=scales,
                               gate_mode="sampled", tau=tau, rng=rng)
        val_loss = compute_loss(logits, graph.labels, graph.masks["val"], task)
        _finite_or_raise(val_loss, epoch, "validation loss")
        val_loss.backward()
        opt_micro.step(store.grads("a_micro"))
        counters["a_micro_updates"] += 1
        if opt_macro is not None:
            opt_macro.step(store.grads("a_macro"))
            counters["a_macro_updates"] += 1

        eval_logits = model.forward(graph, choices, scales=None,
                                    gate_mode="deterministic", tau=tau)
        val_metric = evaluate(eval_logits, graph.labels, graph.masks["val"], task)
        rec = {
            "epoch": epoch,
            "tau": tau,
            "train_loss": train_loss,
            "val_loss": val_loss.item(),
            "val_metric": val_metric,
            "indices": {f"l{l}/{k}": v for (l, k), v in sorted(indices.items())},
        }
        if model.router is not None:
            rec["gates"] = {f"{i}_{j}": v
                            for (i, j), v in sorted(model.router.gate_expectations().items())}
        log.append(rec)

    return SearchResult(genotype=model.derive_genotype(), log=log,
                        supernet=model, counters=counters)


def _apply_noise(pbar, tau, noise):
    out = {}
    for key, p in sorted(pbar.items()):
        if tau == 0.0:
            out[key] = p
            continue
        numer = p + Tensor(tau * noise[key].reshape(p.data.shape))
        out[key] = T.div(numer, T.tsum(numer))
    return out


# -- retraining ----------------------------------------------------------------------

def retrain_genotype(genotype, graph, epochs=300, seed=0, lr=0.005,
                     weight_decay=5e-4, patience=50, freeze_layers=()):
    """Fresh-weight training of the discrete architecture.

    Early-stops on the validation metric (given patience) and reports the
    test metric at the best-validation checkpoint.
    """
    if not graph.masks:
        raise ValueError("retrain_genotype requires a graph with masks")
    task = graph.spec.task
    net = GenotypeNet(genotype, graph.spec.feature_dim, graph.spec.num_classes, seed=seed)
    opt = Adam(net.store, net.w_param_names(freeze_layers), lr, weight_decay)

    best = {"val": -1.0, "epoch": -1, "weights": None}
    since_best = 0
    for epoch in range(epochs):
        net.store.zero_grad()
        logits = net.forward(graph)
        loss = compute_loss(logits, graph.labels, graph.masks["train"], task)
        if not np.isfinite(loss.data).all():
            raise SearchError(f"non-finite retraining loss at epoch {epoch}")
        loss.backward()
        opt.step(net.store.grads("w"))

        val = evaluate(net.forward(graph), graph.labels, graph.masks["val"], task)
        if val > best["val"]:
            best = {"val": val, "epoch": epoch,
                    "weights": {n: t.data.copy() for n, t in net.store.items()}}
            since_best = 0
        else:
            since_best += 1
            if since_best > patience:
                break

    for n, w in best["weights"].items():
        net.store[n].data = w
    logits = net.forward(graph)
    report = {
        "train_metric": evaluate(logits, graph.labels, graph.masks["train"], task),
        "val_metric": best["val"],
        "test_metric": evaluate(logits, graph.labels, graph.masks["test"], task),
        "best_epoch": best["epoch"],
    }
    return net, report


# -- grid search -----------------------------------------------------------------------

def _grid_worker(args):
    config, graph, hidden, seed = args
    result = dual_search(config, graph, hidden=hidden, seed=seed)
    store = result.supernet.store
    state = {n: (store.group_of(n), t.data) for n, t in store.items()}
    return (hidden, result.genotype.to_dict(), result.log,
            result.final_val_metric, state, result.counters)


def grid_search_hidden(config, graph, max_workers=1):
    """Run dual_search per hidden size; best (max val metric, ties -> smaller size)."""
    if not config.hidden_grid:
        raise ValueError("empty hidden-size grid")
    jobs = [(config, graph, h, config.seed + k)
            for k, h in enumerate(config.hidden_grid)]
    if max_workers > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(_grid_worker, jobs))
    else:
        rows = [_grid_worker(j) for j in jobs]
    rows.sort(key=lambda r: (-r[3], r[0]))
    best_hidden, best_geno, _, best_metric, best_state, best_counters = rows[0]
    return {
        "hidden": best_hidden,
        "genotype": Genotype.from_dict(best_geno),
        "val_metric": best_metric,
        "store_state": best_state,
        "counters": best_counters,
        "per_size": {h: {"genotype": g, "log": lg, "val_metric": m}
                     for h, g, lg, m, _, _ in rows},
    }
