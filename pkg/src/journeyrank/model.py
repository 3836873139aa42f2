"""Multi-task journey ranking model.

Two shared MLP towers embed listing features and search context. A stack
of per-task heads turns the pair of embeddings into conditional logits for
each positive funnel milestone; chaining their log-sigmoids yields joint
log-probabilities, and the deepest one (uncancelled booking) is the base
ranking score. Further heads score each negative outcome (rejection and
the two cancellation kinds) as binary classifiers over their eligible
rows. A small coefficient MLP, reading the context embedding alone, blends
the base score with the negative-outcome logits into the final score; the
blend sees all scores through a gradient stop, so its loss tunes only the
blend coefficients and the context they are conditioned on, never the
scoring heads themselves.

Everything trains jointly from whole-search minibatches by summing three
losses: a listwise softmax loss per positive milestone, a masked binary
cross-entropy per negative milestone, and a pairwise preference loss on
the blended score.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataio import PackedSearches, pack_dataset
from .domain import (
    Dataset,
    DatasetSchema,
    NEGATIVE_MILESTONES,
    NEGATIVE_PARENT,
    POSITIVE_CHAIN,
    task_weights,
)
from .errors import (
    ConfigError,
    ContractError,
    SchemaMismatchError,
    TrainingDivergenceError,
)
from . import nn
from .nn import MlpSpec, ParameterStore, Tape, Tensor


# ---------------------------------------------------------------------------
# configuration


def _mlp_spec_to_record(spec: MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
        "seed": spec.seed,
    }


def _mlp_spec_from_record(rec: dict) -> MlpSpec:
    try:
        return MlpSpec(input_dim=rec["input_dim"],
                       hidden_dims=tuple(rec["hidden_dims"]),
                       output_dim=rec["output_dim"],
                       activation=rec["activation"],
                       seed=rec["seed"])
    except KeyError as exc:
        raise ConfigError(f"mlp spec record missing key {exc}") from None


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss layout for one ranking model.

    ``base_tasks`` lists the positive milestones to chain, in funnel order,
    always ending at the uncancelled-booking task whose joint probability
    is the base score. ``twiddler_tasks`` lists the negative milestones
    given dedicated re-ranking heads; when present, ``combination`` must
    produce one coefficient for the base score plus one per twiddler.
    """

    listing_tower: MlpSpec
    context_tower: MlpSpec
    embedding_dim: int
    base_tasks: tuple[str, ...]
    head_specs: Mapping[str, MlpSpec]
    twiddler_tasks: tuple[str, ...] = ()
    combination: MlpSpec | None = None
    task_loss_weights: Mapping[str, float] | None = None
    seed: int = 0

    def __post_init__(self):
        base = tuple(self.base_tasks)
        twiddlers = tuple(self.twiddler_tasks)
        object.__setattr__(self, "base_tasks", base)
        object.__setattr__(self, "twiddler_tasks", twiddlers)
        if not base:
            raise ConfigError("base_tasks must not be empty")
        unknown = [t for t in base if t not in POSITIVE_CHAIN]
        if unknown:
            raise ConfigError(f"unknown base tasks {unknown}; choose from "
                              f"{POSITIVE_CHAIN}")
        order = [POSITIVE_CHAIN.index(t) for t in base]
        if order != sorted(set(order)):
            raise ConfigError("base_tasks must follow funnel order without "
                              "repeats")
        if base[-1] != "unc":
            raise ConfigError("base_tasks must end at unc (the task whose "
                              "joint probability is the base score)")
        unknown = [t for t in twiddlers if t not in NEGATIVE_MILESTONES]
        if unknown:
            raise ConfigError(f"unknown twiddler tasks {unknown}; choose "
                              f"from {NEGATIVE_MILESTONES}")
        if len(set(twiddlers)) != len(twiddlers):
            raise ConfigError("twiddler_tasks must not repeat")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        for name, tower in (("listing_tower", self.listing_tower),
                            ("context_tower", self.context_tower)):
            if tower.output_dim != self.embedding_dim:
                raise ConfigError(
                    f"{name} output width {tower.output_dim} must equal "
                    f"embedding_dim {self.embedding_dim}")
        expected_heads = set(base) | set(twiddlers)
        if set(self.head_specs) != expected_heads:
            raise ConfigError(
                f"head_specs keys {sorted(self.head_specs)} must cover "
                f"exactly the configured tasks {sorted(expected_heads)}")
        for task, spec in self.head_specs.items():
            if spec.input_dim != 2 * self.embedding_dim:
                raise ConfigError(
                    f"head {task} input width {spec.input_dim} must be "
                    f"twice embedding_dim ({2 * self.embedding_dim})")
            if spec.output_dim != 1:
                raise ConfigError(f"head {task} must output a single logit")
        if self.combination is not None:
            if not twiddlers:
                raise ConfigError("a combination layer without twiddler "
                                  "tasks has nothing to blend")
            if self.combination.input_dim != self.embedding_dim:
                raise ConfigError(
                    "combination reads the context embedding only; input "
                    f"width must be {self.embedding_dim}")
            if self.combination.output_dim != 1 + len(twiddlers):
                raise ConfigError(
                    "combination must output one coefficient for the base "
                    f"score plus one per twiddler ({1 + len(twiddlers)})")
        if self.task_loss_weights is not None:
            if set(self.task_loss_weights) != set(base):
                raise ConfigError("task_loss_weights keys must match "
                                  "base_tasks")
            for task, w in self.task_loss_weights.items():
                if not np.isfinite(w) or w <= 0:
                    raise ConfigError(f"weight for {task} must be positive")

    @property
    def all_tasks(self) -> tuple[str, ...]:
        return self.base_tasks + self.twiddler_tasks

    @property
    def scores_with_combination(self) -> bool:
        return self.combination is not None


def default_model_config(listing_dim: int, context_dim: int, *,
                         embedding_dim: int = 12,
                         tower_hidden: tuple[int, ...] = (24,),
                         head_hidden: tuple[int, ...] = (),
                         combination_hidden: tuple[int, ...] = (8,),
                         base_tasks: tuple[str, ...] = POSITIVE_CHAIN,
                         twiddler_tasks: tuple[str, ...] = NEGATIVE_MILESTONES,
                         task_loss_weights: Mapping[str, float] | None = None,
                         seed: int = 0) -> ModelConfig:
    """A compact architecture suitable for desk-scale experiments."""
    heads = {task: MlpSpec(input_dim=2 * embedding_dim,
                           hidden_dims=head_hidden, output_dim=1)
             for task in tuple(base_tasks) + tuple(twiddler_tasks)}
    combination = None
    if twiddler_tasks:
        combination = MlpSpec(input_dim=embedding_dim,
                              hidden_dims=combination_hidden,
                              output_dim=1 + len(twiddler_tasks))
    return ModelConfig(
        listing_tower=MlpSpec(input_dim=listing_dim, hidden_dims=tower_hidden,
                              output_dim=embedding_dim),
        context_tower=MlpSpec(input_dim=context_dim, hidden_dims=tower_hidden,
                              output_dim=embedding_dim),
        embedding_dim=embedding_dim,
        base_tasks=tuple(base_tasks),
        head_specs=heads,
        twiddler_tasks=tuple(twiddler_tasks),
        combination=combination,
        task_loss_weights=task_loss_weights,
        seed=seed,
    )


def baseline_model_config(listing_dim: int, context_dim: int, *,
                          embedding_dim: int = 12,
                          tower_hidden: tuple[int, ...] = (24,),
                          head_hidden: tuple[int, ...] = (),
                          seed: int = 0) -> ModelConfig:
    """Single-task configuration: one head predicting uncancelled bookings.

    This is the production-style reference the multi-task model is judged
    against; it shares the tower architecture but trains one listwise task
    and no blending layer.
    """
    return default_model_config(listing_dim, context_dim,
                                embedding_dim=embedding_dim,
                                tower_hidden=tower_hidden,
                                head_hidden=head_hidden,
                                base_tasks=("unc",), twiddler_tasks=(),
                                seed=seed)


def model_config_to_record(config: ModelConfig) -> dict:
    return {
        "listing_tower": _mlp_spec_to_record(config.listing_tower),
        "context_tower": _mlp_spec_to_record(config.context_tower),
        "embedding_dim": config.embedding_dim,
        "base_tasks": list(config.base_tasks),
        "head_specs": {task: _mlp_spec_to_record(spec)
                       for task, spec in config.head_specs.items()},
        "twiddler_tasks": list(config.twiddler_tasks),
        "combination": (None if config.combination is None
                        else _mlp_spec_to_record(config.combination)),
        "task_loss_weights": (None if config.task_loss_weights is None
                              else {k: float(v) for k, v in
                                    config.task_loss_weights.items()}),
        "seed": config.seed,
    }


def model_config_from_record(rec: dict) -> ModelConfig:
    try:
        return ModelConfig(
            listing_tower=_mlp_spec_from_record(rec["listing_tower"]),
            context_tower=_mlp_spec_from_record(rec["context_tower"]),
            embedding_dim=rec["embedding_dim"],
            base_tasks=tuple(rec["base_tasks"]),
            head_specs={task: _mlp_spec_from_record(spec)
                        for task, spec in rec["head_specs"].items()},
            twiddler_tasks=tuple(rec["twiddler_tasks"]),
            combination=(None if rec["combination"] is None
                         else _mlp_spec_from_record(rec["combination"])),
            task_loss_weights=rec["task_loss_weights"],
            seed=rec["seed"],
        )
    except KeyError as exc:
        raise ConfigError(f"model config record missing key {exc}") from None


# ---------------------------------------------------------------------------
# parameters


_TOWER_LISTING = "tower_listing"
_TOWER_CONTEXT = "tower_context"
_COMBINATION = "combination"


def _head_prefix(task: str) -> str:
    return f"head_{task}"


def init_model_params(config: ModelConfig) -> ParameterStore:
    """Fresh parameters for every module, drawn from one seeded stream."""
    rng = np.random.default_rng(config.seed)
    store = ParameterStore()
    nn.init_mlp_params(store, _TOWER_LISTING, config.listing_tower, rng)
    nn.init_mlp_params(store, _TOWER_CONTEXT, config.context_tower, rng)
    for task in config.all_tasks:
        nn.init_mlp_params(store, _head_prefix(task),
                           config.head_specs[task], rng)
    if config.combination is not None:
        nn.init_mlp_params(store, _COMBINATION, config.combination, rng)
    return store


def parameter_count(config: ModelConfig) -> int:
    total = config.listing_tower.n_params + config.context_tower.n_params
    total += sum(config.head_specs[t].n_params for t in config.all_tasks)
    if config.combination is not None:
        total += config.combination.n_params
    return total


def module_parameter_names(config: ModelConfig) -> dict[str, list[str]]:
    """Parameter names grouped by module, for gradient bookkeeping."""
    store = init_model_params(config)
    groups: dict[str, list[str]] = {
        "listing_tower": [], "context_tower": [], "base_heads": [],
        "twiddler_heads": [], "combination": [],
    }
    for name in store.names():
        if name.startswith(_TOWER_LISTING):
            groups["listing_tower"].append(name)
        elif name.startswith(_TOWER_CONTEXT):
            groups["context_tower"].append(name)
        elif name.startswith(_COMBINATION):
            groups["combination"].append(name)
        else:
            task = name.split(".")[0][len("head_"):]
            key = "base_heads" if task in POSITIVE_CHAIN else "twiddler_heads"
            groups[key].append(name)
    return groups


# ---------------------------------------------------------------------------
# feature normalization


@dataclass(frozen=True)
class NormalizationStats:
    """Per-column standardization fitted on the training rows.

    Columns with zero spread keep scale 1 so constant features pass
    through centered instead of dividing by zero.
    """

    listing_mean: np.ndarray
    listing_scale: np.ndarray
    context_mean: np.ndarray
    context_scale: np.ndarray

    @staticmethod
    def _fit_columns(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = rows.mean(axis=0)
        scale = rows.std(axis=0)
        scale = np.where(scale < 1e-12, 1.0, scale)
        return mean, scale

    @classmethod
    def fit(cls, listing_rows: np.ndarray,
            context_rows: np.ndarray) -> "NormalizationStats":
        if len(listing_rows) == 0:
            raise ContractError("cannot fit normalization on zero rows")
        lm, ls = cls._fit_columns(np.asarray(listing_rows, dtype=np.float64))
        cm, cs = cls._fit_columns(np.asarray(context_rows, dtype=np.float64))
        return cls(listing_mean=lm, listing_scale=ls,
                   context_mean=cm, context_scale=cs)

    def apply_listing(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        return (rows - self.listing_mean) / self.listing_scale

    def apply_context(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        return (rows - self.context_mean) / self.context_scale

    def to_record(self) -> dict:
        return {
            "listing_mean": [float(v) for v in self.listing_mean],
            "listing_scale": [float(v) for v in self.listing_scale],
            "context_mean": [float(v) for v in self.context_mean],
            "context_scale": [float(v) for v in self.context_scale],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "NormalizationStats":
        try:
            return cls(
                listing_mean=np.asarray(rec["listing_mean"], dtype=np.float64),
                listing_scale=np.asarray(rec["listing_scale"],
                                         dtype=np.float64),
                context_mean=np.asarray(rec["context_mean"], dtype=np.float64),
                context_scale=np.asarray(rec["context_scale"],
                                         dtype=np.float64),
            )
        except KeyError as exc:
            raise ConfigError(
                f"normalization record missing key {exc}") from None


# ---------------------------------------------------------------------------
# forward passes


@dataclass(frozen=True)
class Embeddings:
    listing: Tensor
    context: Tensor


@dataclass(frozen=True)
class ModelOutputs:
    """Every intermediate score for a batch of impressions."""

    cond_logits: dict[str, Tensor]
    log_joint: dict[str, Tensor]
    y_base: Tensor
    y_twiddler: dict[str, Tensor]
    alpha_base: Tensor | None
    alpha_twiddler: dict[str, Tensor]
    y_combination: Tensor | None

    @property
    def ranking_score(self) -> Tensor:
        return self.y_combination if self.y_combination is not None \
            else self.y_base


def shared_forward(config: ModelConfig, params: ParameterStore,
                   listing_rows: np.ndarray,
                   context_rows: np.ndarray) -> Embeddings:
    """Embed pre-normalized listing and context rows with the two towers."""
    listing = nn.constant(np.asarray(listing_rows, dtype=np.float64))
    context = nn.constant(np.asarray(context_rows, dtype=np.float64))
    emb_l = nn.forward_mlp(params, _TOWER_LISTING, config.listing_tower,
                           listing)
    emb_c = nn.forward_mlp(params, _TOWER_CONTEXT, config.context_tower,
                           context)
    return Embeddings(listing=emb_l, context=emb_c)


def _head_logit(config: ModelConfig, params: ParameterStore, task: str,
                joint_emb: Tensor) -> Tensor:
    out = nn.forward_mlp(params, _head_prefix(task),
                         config.head_specs[task], joint_emb)
    return nn.column(out, 0)


def base_forward(config: ModelConfig, params: ParameterStore,
                 emb: Embeddings) -> tuple[dict[str, Tensor],
                                           dict[str, Tensor]]:
    """Conditional logits and cumulative joint log-probabilities.

    The joint log-probability of task k is the running sum of
    log-sigmoid conditional logits down the funnel, so each additional
    stage can only lower it.
    """
    joint_emb = nn.concat_cols(emb.listing, emb.context)
    cond_logits: dict[str, Tensor] = {}
    log_joint: dict[str, Tensor] = {}
    running: Tensor | None = None
    for task in config.base_tasks:
        logit = _head_logit(config, params, task, joint_emb)
        cond_logits[task] = logit
        step = nn.log_sigmoid(logit)
        running = step if running is None else nn.add(running, step)
        log_joint[task] = running
    return cond_logits, log_joint


def twiddler_forward(config: ModelConfig, params: ParameterStore,
                     emb: Embeddings) -> dict[str, Tensor]:
    joint_emb = nn.concat_cols(emb.listing, emb.context)
    return {task: _head_logit(config, params, task, joint_emb)
            for task in config.twiddler_tasks}


def combination_forward(config: ModelConfig, params: ParameterStore,
                        emb: Embeddings, y_base: Tensor,
                        y_twiddler: Mapping[str, Tensor],
                        ) -> tuple[Tensor, dict[str, Tensor], Tensor]:
    """Blend the frozen scores with context-conditioned coefficients.

    The coefficient MLP reads the context embedding only. The base
    coefficient passes through softplus so it stays strictly positive;
    twiddler coefficients are free to change sign. Score inputs are
    gradient-stopped, so the blending loss shapes coefficients, not
    scores.
    """
    if config.combination is None:
        raise ConfigError("model config has no combination layer")
    coefs = nn.forward_mlp(params, _COMBINATION, config.combination,
                           emb.context)
    alpha_base = nn.softplus(nn.column(coefs, 0))
    y = nn.mul(alpha_base, nn.stop_gradient(y_base))
    alpha_twiddler: dict[str, Tensor] = {}
    for k, task in enumerate(config.twiddler_tasks):
        alpha = nn.column(coefs, 1 + k)
        alpha_twiddler[task] = alpha
        y = nn.add(y, nn.mul(alpha, nn.stop_gradient(y_twiddler[task])))
    return alpha_base, alpha_twiddler, y


def forward(config: ModelConfig, params: ParameterStore,
            listing_rows: np.ndarray,
            context_rows: np.ndarray) -> ModelOutputs:
    """Full forward pass over pre-normalized feature rows."""
    emb = shared_forward(config, params, listing_rows, context_rows)
    cond_logits, log_joint = base_forward(config, params, emb)
    y_base = log_joint[config.base_tasks[-1]]
    y_twiddler = twiddler_forward(config, params, emb)
    alpha_base = None
    alpha_twiddler: dict[str, Tensor] = {}
    y_combination = None
    if config.combination is not None:
        alpha_base, alpha_twiddler, y_combination = combination_forward(
            config, params, emb, y_base, y_twiddler)
    return ModelOutputs(cond_logits=cond_logits, log_joint=log_joint,
                        y_base=y_base, y_twiddler=y_twiddler,
                        alpha_base=alpha_base,
                        alpha_twiddler=alpha_twiddler,
                        y_combination=y_combination)


# ---------------------------------------------------------------------------
# batches


def relevance_grades(labels: Mapping[str, np.ndarray]) -> np.ndarray:
    """Per-impression preference grade for the pairwise blending loss.

    Uncancelled bookings (3) beat clean clicks (2) beat plain impressions
    (1) beat impressions that ended in any negative outcome (0).
    """
    n = len(labels["c"])
    grades = np.ones(n, dtype=np.int64)
    grades[labels["c"]] = 2
    grades[labels["unc"]] = 3
    negative = labels["rej"] | labels["cbh"] | labels["cbg"]
    grades[negative] = 0
    return grades


def preference_pairs(grades: np.ndarray, seg: np.ndarray,
                     n_segments: int) -> tuple[np.ndarray, np.ndarray]:
    """All within-search index pairs (i, j) with grade[i] > grade[j]."""
    starts = np.flatnonzero(np.r_[True, np.diff(seg) != 0])
    bounds = np.r_[starts, len(seg)]
    pair_i, pair_j = [], []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        g = grades[lo:hi]
        ii, jj = np.nonzero(g[:, None] > g[None, :])
        pair_i.append(ii + lo)
        pair_j.append(jj + lo)
    if not pair_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(pair_i), np.concatenate(pair_j)


@dataclass(frozen=True)
class SearchBatch:
    """A minibatch of whole searches, ready for the forward pass."""

    listing_rows: np.ndarray
    context_rows: np.ndarray
    seg: np.ndarray
    n_searches: int
    labels: dict[str, np.ndarray]
    pair_i: np.ndarray
    pair_j: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.seg)


def make_batch(packed: PackedSearches, search_indices: np.ndarray,
               norm: NormalizationStats) -> SearchBatch:
    search_indices = np.asarray(search_indices, dtype=np.int64)
    rows = packed.imp_rows_for_searches(search_indices)
    counts = (packed.search_starts[search_indices + 1]
              - packed.search_starts[search_indices])
    seg = np.repeat(np.arange(len(search_indices)), counts)
    labels = {name: values[rows] for name, values in packed.labels.items()}
    grades = relevance_grades(labels)
    pair_i, pair_j = preference_pairs(grades, seg, len(search_indices))
    context_rows = packed.context_features[packed.search_of_imp[rows]]
    return SearchBatch(
        listing_rows=norm.apply_listing(packed.listing_features[rows]),
        context_rows=norm.apply_context(context_rows),
        seg=seg,
        n_searches=len(search_indices),
        labels=labels,
        pair_i=pair_i,
        pair_j=pair_j,
    )


# ---------------------------------------------------------------------------
# losses


def base_loss(log_joint: Mapping[str, Tensor], batch: SearchBatch,
              weights: Mapping[str, float]) -> Tensor:
    """Weighted listwise softmax loss summed over tasks and positives.

    For each task, every positively labeled impression contributes the
    negative log-softmax of its joint log-probability against all
    impressions of its search.
    """
    total: Tensor | None = None
    for task, scores in log_joint.items():
        positive_rows = np.flatnonzero(batch.labels[task])
        if positive_rows.size == 0:
            continue
        lse = nn.segment_logsumexp(scores, batch.seg, batch.n_searches)
        per_positive = nn.sub(nn.gather(lse, batch.seg[positive_rows]),
                              nn.gather(scores, positive_rows))
        term = nn.scale(nn.total_sum(per_positive), float(weights[task]))
        total = term if total is None else nn.add(total, term)
    if total is None:
        return nn.constant(0.0)
    return total


def twiddler_loss(y_twiddler: Mapping[str, Tensor],
                  batch: SearchBatch) -> Tensor:
    """Masked binary cross-entropy summed over negative-outcome tasks.

    Each task is scored only on its eligible rows: rejection on requested
    impressions, either cancellation kind on booked impressions. A task
    with no eligible rows contributes exactly zero.
    """
    total: Tensor | None = None
    for task, logits in y_twiddler.items():
        eligible = np.flatnonzero(batch.labels[NEGATIVE_PARENT[task]])
        if eligible.size == 0:
            continue
        z = nn.gather(logits, eligible)
        targets = batch.labels[task][eligible].astype(np.float64)
        per_row = nn.sub(nn.softplus(z), nn.mul(nn.constant(targets), z))
        term = nn.total_mean(per_row)
        total = term if total is None else nn.add(total, term)
    if total is None:
        return nn.constant(0.0)
    return total


def combination_loss(y_combination: Tensor, batch: SearchBatch) -> Tensor:
    """Pairwise logistic loss over within-search grade violations."""
    if batch.pair_i.size == 0:
        return nn.constant(0.0)
    diff = nn.sub(nn.gather(y_combination, batch.pair_i),
                  nn.gather(y_combination, batch.pair_j))
    return nn.scale(nn.total_mean(nn.log_sigmoid(diff)), -1.0)


def total_loss(config: ModelConfig, params: ParameterStore,
               batch: SearchBatch, weights: Mapping[str, float],
               ) -> tuple[Tensor, ModelOutputs, dict[str, float]]:
    """Unweighted sum of the module losses present in the config."""
    outputs = forward(config, params, batch.listing_rows, batch.context_rows)
    parts: dict[str, float] = {}
    loss = base_loss(outputs.log_joint, batch, weights)
    parts["base"] = float(loss.values)
    if config.twiddler_tasks:
        term = twiddler_loss(outputs.y_twiddler, batch)
        parts["twiddler"] = float(term.values)
        loss = nn.add(loss, term)
    if outputs.y_combination is not None:
        term = combination_loss(outputs.y_combination, batch)
        parts["combination"] = float(term.values)
        loss = nn.add(loss, term)
    parts["total"] = float(loss.values)
    return loss, outputs, parts


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    losses: dict[str, float]


@dataclass(frozen=True)
class TrainedModel:
    """Immutable bundle of everything needed to score new searches."""

    config: ModelConfig
    params: ParameterStore
    normalization: NormalizationStats
    schema_hash: str

    def require_schema(self, schema: DatasetSchema) -> None:
        if schema.hash() != self.schema_hash:
            raise SchemaMismatchError(
                "dataset schema does not match the schema this model was "
                f"trained on ({schema.hash()[:12]} != "
                f"{self.schema_hash[:12]})")

    def outputs(self, context: np.ndarray,
                listing_rows: np.ndarray) -> ModelOutputs:
        """Score candidates for one search context (no gradients)."""
        listing_rows = np.asarray(listing_rows, dtype=np.float64)
        if listing_rows.ndim != 2:
            raise ContractError("listing rows must be a 2-d batch")
        context = np.asarray(context, dtype=np.float64)
        context_rows = np.broadcast_to(context,
                                       (len(listing_rows), len(context)))
        return forward(self.config, self.params,
                       self.normalization.apply_listing(listing_rows),
                       self.normalization.apply_context(context_rows))


def resolve_task_weights(config: ModelConfig,
                         dataset: Dataset) -> dict[str, float]:
    """Configured weights when given, else inverse-prevalence weights
    anchored so the deepest task weighs 1."""
    if config.task_loss_weights is not None:
        return {t: float(w) for t, w in config.task_loss_weights.items()}
    return task_weights(dataset, config.base_tasks)


def train(config: ModelConfig, dataset: Dataset, epochs: int, *,
          batch_size: int = 64, learning_rate: float = 1e-3,
          ) -> tuple[TrainedModel, list[EpochStats]]:
    """Fit the model with Adam over whole-search minibatches.

    The dataset is expected to be validated and training-filtered
    already. Runs are deterministic per config seed: initialization,
    shuffling, and batching all derive from it.
    """
    if epochs < 0:
        raise ConfigError("epochs must be non-negative")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    packed = pack_dataset(dataset)
    if packed.n_searches == 0:
        raise ContractError("training dataset has no searches")
    norm = NormalizationStats.fit(packed.listing_features,
                                  packed.context_features)
    weights = resolve_task_weights(config, dataset)
    params = init_model_params(config)
    state = nn.init_adam(params, nn.AdamConfig(learning_rate=learning_rate))
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(1,)))
    history: list[EpochStats] = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(packed.n_searches)
        sums: dict[str, float] = {}
        for lo in range(0, len(order), batch_size):
            batch = make_batch(packed, order[lo:lo + batch_size], norm)
            with Tape() as tape:
                loss, _, parts = total_loss(config, params, batch, weights)
                if not np.isfinite(loss.values):
                    raise TrainingDivergenceError(epoch)
                nn.backward(tape, loss)
            nn.optimizer_step(params, state)
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
        history.append(EpochStats(epoch=epoch, losses=sums))
    model = TrainedModel(config=config, params=params, normalization=norm,
                         schema_hash=dataset.schema.hash())
    return model, history


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class ScoredCandidate:
    listing_id: str
    rank: int
    score: float
    y_base: float
    y_combination: float | None
    log_joint: dict[str, float]
    cond_logits: dict[str, float]
    y_twiddler: dict[str, float]
    alpha_base: float | None
    alpha_twiddler: dict[str, float]


def score_candidates(model: TrainedModel, context: np.ndarray,
                     listing_ids: list[str],
                     listing_rows: np.ndarray) -> list[ScoredCandidate]:
    """Rank candidates for a context, best first, ties by listing id."""
    listing_ids = [str(lid) for lid in listing_ids]
    listing_rows = np.asarray(listing_rows, dtype=np.float64)
    if len(listing_ids) == 0:
        raise ContractError("cannot rank an empty candidate list")
    if listing_rows.ndim != 2 or len(listing_rows) != len(listing_ids):
        raise ContractError("one feature row per candidate is required")
    outputs = model.outputs(context, listing_rows)
    score = outputs.ranking_score.values
    order = np.lexsort((np.asarray(listing_ids), -score))
    ranked = []
    for rank, k in enumerate(order, start=1):
        k = int(k)
        ranked.append(ScoredCandidate(
            listing_id=listing_ids[k],
            rank=rank,
            score=float(score[k]),
            y_base=float(outputs.y_base.values[k]),
            y_combination=(None if outputs.y_combination is None
                           else float(outputs.y_combination.values[k])),
            log_joint={t: float(v.values[k])
                       for t, v in outputs.log_joint.items()},
            cond_logits={t: float(v.values[k])
                         for t, v in outputs.cond_logits.items()},
            y_twiddler={t: float(v.values[k])
                        for t, v in outputs.y_twiddler.items()},
            alpha_base=(None if outputs.alpha_base is None
                        else float(outputs.alpha_base.values[k])),
            alpha_twiddler={t: float(v.values[k])
                            for t, v in outputs.alpha_twiddler.items()},
        ))
    return ranked


def blend_coefficients(model: TrainedModel, context_rows: np.ndarray,
                       ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Blend coefficients for raw context rows, for interpretability.

    Returns the positive base coefficient and the signed coefficient per
    twiddler task, one value per input row.
    """
    config = model.config
    if config.combination is None:
        raise ConfigError("model has no combination layer")
    context_rows = np.asarray(context_rows, dtype=np.float64)
    if context_rows.ndim != 2:
        raise ContractError("context rows must be a 2-d batch")
    normalized = model.normalization.apply_context(context_rows)
    emb_c = nn.forward_mlp(model.params, _TOWER_CONTEXT,
                           config.context_tower, nn.constant(normalized))
    coefs = nn.forward_mlp(model.params, _COMBINATION, config.combination,
                           emb_c)
    values = coefs.values
    alpha_base = np.logaddexp(0.0, values[:, 0])
    alpha_twiddler = {task: values[:, 1 + k].copy()
                      for k, task in enumerate(config.twiddler_tasks)}
    return alpha_base, alpha_twiddler


# ---------------------------------------------------------------------------
# persistence


def save_model(model: TrainedModel, directory: str | Path) -> None:
    extra = {
        "model_config": model_config_to_record(model.config),
        "normalization": model.normalization.to_record(),
        "schema_hash": model.schema_hash,
    }
    nn.save_params(model.params, directory, extra=extra)


def load_model(directory: str | Path) -> TrainedModel:
    params, manifest = nn.load_params(directory)
    for key in ("model_config", "normalization", "schema_hash"):
        if key not in manifest:
            raise SchemaMismatchError(
                f"{directory}: model manifest missing {key}")
    return TrainedModel(
        config=model_config_from_record(manifest["model_config"]),
        params=params,
        normalization=NormalizationStats.from_record(
            manifest["normalization"]),
        schema_hash=manifest["schema_hash"],
    )
