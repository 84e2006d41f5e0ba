"""
MACO Model - feature, relational, conditioning and classification stages
Batched forward over episodes plus the no-conditioning ablation
"""
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from episodes import Episode
from errors import ConfigError, EmptySetError, ShapeError
from schemas import ModelConfig
from tensor_core import (
    ParamStore,
    Tensor,
    add,
    batchnorm,
    concat,
    constant,
    conv1d_valid,
    conv2d_same,
    dense,
    elu,
    glorot_normal,
    lecun_normal,
    log_softmax,
    maxpool2,
    mean_axis,
    reshape,
    segment_mean,
    softmax_cross_entropy,
    stack,
    take_rows,
)

Mode = Literal["train", "eval"]
MODES = ("train", "eval")

__all__ = [
    "Episode",
    "ForwardResult",
    "MacoModel",
    "Mode",
    "ModelStats",
    "classification_stage",
    "conditioning_stage",
    "feature_stage",
    "forward_episodes",
    "init_params",
    "maco_forward",
    "relational_g",
    "relational_stage",
]


def _is_training(mode: str) -> bool:
    if mode not in MODES:
        raise ConfigError(f"Invalid mode: '{mode}'\nValid options: {list(MODES)}")
    return mode == "train"


@dataclass
class ModelStats:
    """Instrumentation counters, reset by the caller."""
    pair_evaluations: int = 0
    feature_rows: int = 0
    episodes: int = 0

    def reset(self) -> None:
        self.pair_evaluations = 0
        self.feature_rows = 0
        self.episodes = 0


# ============================================================================
# PARAMETERS
# ============================================================================

def _add_dense(params: ParamStore, rng: np.random.Generator, path: str, fan_in: int, fan_out: int) -> None:
    params.add(f"{path}/weight", lecun_normal(rng, (fan_out, fan_in), fan_in))
    params.add(f"{path}/bias", np.zeros(fan_out))


def _add_conv(params: ParamStore, rng: np.random.Generator, path: str, shape: Tuple[int, ...],
              receptive: int) -> None:
    in_channels, out_channels = shape[-2], shape[-1]
    kernel = glorot_normal(rng, shape, receptive * in_channels, receptive * out_channels)
    params.add(f"{path}/kernel", kernel)
    params.add(f"{path}/bias", np.zeros(out_channels))


def _add_fc_blocks(params: ParamStore, rng: np.random.Generator, config: ModelConfig, stage: str,
                   in_dim: int, depth: int) -> None:
    for block in range(1, depth + 1):
        width = in_dim if block == 1 else config.embed_dim
        _add_dense(params, rng, f"{stage}/block{block}/dense", width, config.embed_dim)
        params.add_batchnorm(f"{stage}/block{block}/bn", config.embed_dim, config.bn_momentum, config.bn_epsilon)


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """
    Fresh parameters for every stage.

    Fully connected weights are LeCun normal, conv kernels Glorot normal,
    biases and beta zero, gamma one. Values are drawn in a fixed path order,
    so equal seeds give bitwise-identical stores.
    """
    rng = np.random.default_rng(seed)
    params = ParamStore()
    filters = config.conv_filters

    in_channels = config.channels
    for block in range(1, config.feature_blocks + 1):
        _add_conv(params, rng, f"feature/block{block}/conv", (3, 3, in_channels, filters), 9)
        params.add_batchnorm(f"feature/block{block}/bn", filters, config.bn_momentum, config.bn_epsilon)
        in_channels = filters
    _add_dense(params, rng, "feature/dense", config.flatten_dim, config.feature_dim)

    _add_fc_blocks(params, rng, config, "relational", 2 * config.feature_dim, config.relational_depth)
    _add_fc_blocks(params, rng, config, "conditioning", config.conditioning_input_dim, config.conditioning_depth)

    embed = config.embed_dim
    for layer in ("conv1", "conv2"):
        _add_conv(params, rng, f"classifier/{layer}", (3, embed, embed), 3)
        params.add_batchnorm(f"classifier/{layer}/bn", embed, config.bn_momentum, config.bn_epsilon)
    _add_dense(params, rng, "classifier/dense", embed + config.feature_dim, embed)
    params.add_batchnorm("classifier/dense/bn", embed, config.bn_momentum, config.bn_epsilon)
    _add_dense(params, rng, "classifier/output", embed, config.ways)

    logger.debug(f"init_params: {len(params)} tensors, {params.num_values} values (seed={seed})")
    return params


# ============================================================================
# STAGES
# ============================================================================

def feature_stage(images: Tensor, params: ParamStore, config: ModelConfig, mode: Mode = "eval") -> Tensor:
    """
    Shared image encoder: conv-bn-elu-pool blocks, flatten, linear layer.

    Args:
        images: Tensor[H x W x C] or Tensor[B x H x W x C]

    Returns:
        Tensor[feature_dim] or Tensor[B x feature_dim]
    """
    training = _is_training(mode)
    single = images.ndim == 3
    x = reshape(images, (1,) + images.shape, path="feature/input") if single else images
    expected = (config.image_size, config.image_size, config.channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError("feature/input", "image extents do not match config", expected=expected, got=images.shape)

    batch = x.shape[0]
    for block in range(1, config.feature_blocks + 1):
        prefix = f"feature/block{block}"
        x = conv2d_same(x, params[f"{prefix}/conv/kernel"], params[f"{prefix}/conv/bias"], path=f"{prefix}/conv")
        x = batchnorm(x, params.batchnorm[f"{prefix}/bn"], training, path=f"{prefix}/bn")
        x = elu(x, path=f"{prefix}/elu")
        x = maxpool2(x, path=f"{prefix}/pool")

    x = reshape(x, (batch, config.flatten_dim), path="feature/flatten")
    x = dense(x, params["feature/dense/weight"], params["feature/dense/bias"], path="feature/dense")
    return reshape(x, (config.feature_dim,), path="feature/output") if single else x


def _fc_blocks(x: Tensor, params: ParamStore, stage: str, depth: int, training: bool) -> Tensor:
    """[dense -> bn -> elu] x depth; output is first block + last block."""
    h = x
    first = None
    for block in range(1, depth + 1):
        prefix = f"{stage}/block{block}"
        h = dense(h, params[f"{prefix}/dense/weight"], params[f"{prefix}/dense/bias"], path=f"{prefix}/dense")
        h = batchnorm(h, params.batchnorm[f"{prefix}/bn"], training, path=f"{prefix}/bn")
        h = elu(h, path=f"{prefix}/elu")
        if block == 1:
            first = h
    return add(first, h, path=f"{stage}/skip")


def _as_rows(x: Tensor, path: str) -> Tuple[Tensor, bool]:
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0]), path=path), True
    return x, False


def relational_g(xi: Tensor, xj: Tensor, params: ParamStore, config: ModelConfig, mode: Mode = "eval") -> Tensor:
    """
    Pair comparison g(xi, xj) on concatenated features; not symmetric.

    Accepts single feature vectors or aligned batches of pairs.
    """
    training = _is_training(mode)
    left, single = _as_rows(xi, "relational/xi")
    right, _ = _as_rows(xj, "relational/xj")
    pair = concat(left, right, axis=-1, path="relational/concat")
    out = _fc_blocks(pair, params, "relational", config.relational_depth, training)
    return reshape(out, (config.embed_dim,), path="relational/output") if single else out


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Row indices sorted lexicographically by row values (stable on ties)."""
    return np.lexsort(rows.T[::-1])


def class_pairs(order: Sequence[int]) -> List[Tuple[int, int]]:
    """Unordered pairs i<j in the given order; a single image pairs with itself."""
    order = list(order)
    if len(order) == 1:
        return [(order[0], order[0])]
    return list(combinations(order, 2))


def relational_stage(
    class_features: Union[Sequence[Tensor], Tensor],
    params: ParamStore,
    config: ModelConfig,
    mode: Mode = "eval",
    stats: Optional[ModelStats] = None,
) -> Tensor:
    """
    Class vector R(S_k): mean of g over the binom(n, 2) unordered pairs.

    Images are put in canonical order before pairing, so the result does not
    depend on the order of the support list. For n = 1 the result is g(x, x).

    Raises:
        EmptySetError: If the class has no images
    """
    if isinstance(class_features, Tensor):
        rows = class_features
    else:
        if len(class_features) == 0:
            raise EmptySetError("relational", "class has no support images")
        rows = stack(list(class_features), path="relational/stack")
    if rows.shape[0] == 0:
        raise EmptySetError("relational", "class has no support images")

    pairs = class_pairs(canonical_order(rows.data))
    xi = take_rows(rows, [a for a, _ in pairs], path="relational/xi")
    xj = take_rows(rows, [b for _, b in pairs], path="relational/xj")
    if stats is not None:
        stats.pair_evaluations += len(pairs)
    return mean_axis(relational_g(xi, xj, params, config, mode), 0, path="relational/mean")


def conditioning_stage(
    class_vec: Tensor,
    query_feat: Optional[Tensor],
    params: ParamStore,
    config: ModelConfig,
    mode: Mode = "eval",
    conditioning_enabled: Optional[bool] = None,
) -> Tensor:
    """
    Conditioned class vector h(R(S_k), q).

    With conditioning disabled the query is ignored and h sees only the
    class vector. Accepts one vector or a batch of rows.
    """
    training = _is_training(mode)
    enabled = config.conditioning_enabled if conditioning_enabled is None else conditioning_enabled
    if enabled != config.conditioning_enabled:
        raise ConfigError(
            f"conditioning_enabled={enabled} does not match parameters built for variant '{config.variant}'"
        )

    x, single = _as_rows(class_vec, "conditioning/class_vec")
    if enabled:
        if query_feat is None:
            raise ShapeError("conditioning/query", "conditioning needs the query feature")
        q, _ = _as_rows(query_feat, "conditioning/query")
        x = concat(x, q, axis=-1, path="conditioning/concat")
    out = _fc_blocks(x, params, "conditioning", config.conditioning_depth, training)
    return reshape(out, (config.embed_dim,), path="conditioning/output") if single else out


def classification_stage(
    conditioned: Union[Sequence[Tensor], Tensor],
    query_feat: Tensor,
    params: ParamStore,
    config: ModelConfig,
    mode: Mode = "eval",
) -> Tensor:
    """
    Logits over the K class positions.

    Args:
        conditioned: K vectors of embed_dim, or Tensor[E x K x embed_dim]
        query_feat: Tensor[feature_dim] or Tensor[E x feature_dim]

    Returns:
        Tensor[K] or Tensor[E x K]

    Raises:
        ShapeError: If K < 5 or K differs from config.ways
    """
    training = _is_training(mode)
    if isinstance(conditioned, Tensor):
        seq, single = conditioned, False
    else:
        seq = reshape(stack(list(conditioned), path="classifier/stack"),
                      (1, len(conditioned), config.embed_dim), path="classifier/sequence")
        single = True
    ways = seq.shape[1]
    if ways < 5:
        raise ShapeError("classifier", "two valid convolutions need at least 5 classes", expected=">= 5", got=ways)
    if ways != config.ways:
        raise ShapeError("classifier", "class count differs from config.ways", expected=config.ways, got=ways)
    q, _ = _as_rows(query_feat, "classifier/query")

    x = seq
    for layer in ("conv1", "conv2"):
        prefix = f"classifier/{layer}"
        x = conv1d_valid(x, params[f"{prefix}/kernel"], params[f"{prefix}/bias"], path=prefix)
        x = batchnorm(x, params.batchnorm[f"{prefix}/bn"], training, path=f"{prefix}/bn")
        x = elu(x, path=f"{prefix}/elu")
    x = mean_axis(x, 1, path="classifier/pool")
    x = concat(x, q, axis=-1, path="classifier/concat")
    x = dense(x, params["classifier/dense/weight"], params["classifier/dense/bias"], path="classifier/dense")
    x = batchnorm(x, params.batchnorm["classifier/dense/bn"], training, path="classifier/dense/bn")
    x = elu(x, path="classifier/dense/elu")
    logits = dense(x, params["classifier/output/weight"], params["classifier/output/bias"], path="classifier/output")
    return reshape(logits, (ways,), path="classifier/logits") if single else logits


# ============================================================================
# FORWARD
# ============================================================================

@dataclass
class ForwardResult:
    """Outputs of one batched forward pass."""
    probs: np.ndarray
    loss: Tensor
    logits: Tensor
    conditioned: np.ndarray
    episode_losses: np.ndarray
    targets: np.ndarray
    inputs: Optional[Tensor] = None
    stats: ModelStats = field(default_factory=ModelStats)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.targets


def _check_geometry(episodes: Sequence[Episode], config: ModelConfig) -> int:
    if len(episodes) == 0:
        raise EmptySetError("forward", "no episodes to process")
    shots = episodes[0].shots
    for ep in episodes:
        if ep.ways != config.ways:
            raise ShapeError("forward", "episode ways differ from config", expected=config.ways, got=ep.ways)
        if ep.shots != shots:
            raise ShapeError("forward", "episodes in one batch must share n", expected=shots, got=ep.shots)
    return shots


def forward_episodes(
    episodes: Sequence[Episode],
    params: ParamStore,
    config: ModelConfig,
    mode: Mode = "train",
    *,
    watch_inputs: bool = False,
    classifier_query: bool = True,
    stats: Optional[ModelStats] = None,
) -> ForwardResult:
    """
    Full MACO forward over a minibatch of episodes.

    All K*n+1 images of every episode pass through the feature stage as one
    batch, so batch-norm statistics span the whole minibatch. Relational,
    conditioning and classification stages keep per-episode structure.

    Args:
        episodes: Episodes sharing K (== config.ways) and n
        watch_inputs: Track gradients w.r.t. the stacked input images
        classifier_query: Feed the query feature into the classifier; when
            False a zero vector takes its place
        stats: Counters to accumulate into

    Returns:
        ForwardResult with the mean loss over episodes
    """
    stats = stats if stats is not None else ModelStats()
    shots = _check_geometry(episodes, config)
    ways = config.ways
    rows_per_episode = ways * shots + 1
    count = len(episodes)

    images = np.concatenate([ep.images() for ep in episodes], axis=0)
    inputs = Tensor(images, requires_grad=watch_inputs, name="inputs")
    features = feature_stage(inputs, params, config, mode)
    stats.feature_rows += images.shape[0]
    stats.episodes += count

    left: List[int] = []
    right: List[int] = []
    segments: List[int] = []
    feature_values = features.data
    for e in range(count):
        base = e * rows_per_episode
        for k in range(ways):
            members = base + k * shots + np.arange(shots)
            ordered = members[canonical_order(feature_values[members])]
            for a, b in class_pairs(ordered):
                left.append(int(a))
                right.append(int(b))
                segments.append(e * ways + k)
    stats.pair_evaluations += len(left)

    xi = take_rows(features, left, path="relational/xi")
    xj = take_rows(features, right, path="relational/xj")
    pair_vectors = relational_g(xi, xj, params, config, mode)
    class_vectors = segment_mean(pair_vectors, segments, count * ways, path="relational/mean")

    query_rows = [e * rows_per_episode + ways * shots for e in range(count)]
    query_features = take_rows(features, query_rows, path="query/features")

    repeated_query = None
    if config.conditioning_enabled:
        repeated_query = take_rows(query_features, np.repeat(np.arange(count), ways), path="conditioning/query_rows")
    conditioned = conditioning_stage(class_vectors, repeated_query, params, config, mode)
    sequence = reshape(conditioned, (count, ways, config.embed_dim), path="classifier/sequence")

    classifier_input = query_features if classifier_query else constant(np.zeros_like(query_features.data))
    logits = classification_stage(sequence, classifier_input, params, config, mode)

    targets = np.array([ep.target for ep in episodes], dtype=np.int64)
    probs, loss = softmax_cross_entropy(logits, targets, path="loss")
    episode_losses = -log_softmax(logits.data.astype(np.float64))[np.arange(count), targets]

    return ForwardResult(
        probs=probs.data,
        loss=loss,
        logits=logits,
        conditioned=sequence.data.copy(),
        episode_losses=episode_losses,
        targets=targets,
        inputs=inputs if watch_inputs else None,
        stats=stats,
    )


def maco_forward(
    episode: Episode,
    params: ParamStore,
    config: ModelConfig,
    mode: Mode = "eval",
) -> Tuple[Tensor, Tensor]:
    """Single-episode forward returning (probs[K], loss)."""
    result = forward_episodes([episode], params, config, mode)
    return Tensor(result.probs[0], dtype=result.probs.dtype, name="probs"), result.loss


# ============================================================================
# MODEL
# ============================================================================

class MacoModel:
    """
    ModelConfig plus its ParamStore and instrumentation counters.

    Attributes:
        config: Architecture hyperparameters
        params: Trainable parameters and batch-norm state
        stats: Counters accumulated by every forward
    """

    def __init__(self, config: ModelConfig, params: Optional[ParamStore] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.stats = ModelStats()

    @property
    def variant(self) -> str:
        return self.config.variant

    def forward(self, episodes: Sequence[Episode], mode: Mode = "train", **kwargs) -> ForwardResult:
        return forward_episodes(episodes, self.params, self.config, mode, stats=self.stats, **kwargs)

    def predict(self, episodes: Sequence[Episode]) -> np.ndarray:
        """Argmax class positions in eval mode."""
        return self.forward(episodes, mode="eval").predictions

    def with_shots(self, shots: int) -> "MacoModel":
        """Same parameters evaluated at a different n (the relational mean is shot-agnostic)."""
        config = ModelConfig.model_validate({**self.config.model_dump(), "shots": shots})
        twin = MacoModel(config, params=self.params)
        twin.stats = self.stats
        return twin

    def __repr__(self) -> str:
        c = self.config
        return f"<MacoModel {c.variant} {c.ways}-way {c.shots}-shot params={self.params.num_values}>"
