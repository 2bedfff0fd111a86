"""
Audio-visual localization network and its losses.

A ``LocalizationNet`` pairs a visual encoder f (pool -> three 3x3 convs) with
an audio encoder g (two fully-connected layers). The predicted map is the
cosine similarity between g(a) and every cell of f(v); the contrastive
objective scores pairs by the cosine between g(a_i) and the attention-pooled
f(v_j).
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from lab.app.config import WorldConfig
from .synthworld import AudioVisualPair
from .tensor import (
    Node,
    Parameter,
    Tensor,
    bce_logits,
    constant,
    conv2d,
    l2_normalize,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    scalar_mul,
    softmax,
    tmean,
    transpose,
    tsum,
)

logger = logging.getLogger(__name__)

INFERENCE_CHUNK = 128


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class Architecture:
    tag: str
    conv_widths: Tuple[int, int]
    audio_hidden: int
    seed: int


ARCHITECTURES: Dict[str, Architecture] = {
    "A": Architecture("A", (8, 16), 32, 11),
    "B": Architecture("B", (12, 20), 24, 23),
}


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


class VisualEncoder:
    """f(v): (N, S, S, ch) -> (N, H, W, E) feature grid"""

    def __init__(self, prefix: str, arch: Architecture, world: WorldConfig, embed_dim: int,
                 rng: np.random.Generator):
        self.arch = arch
        self.world = world
        w1, w2 = arch.conv_widths
        widths = [(world.channels, w1), (w1, w2), (w2, embed_dim)]
        self.params: List[Parameter] = []
        for k, (cin, cout) in enumerate(widths, start=1):
            self.params.append(Parameter(_he(rng, (3, 3, cin, cout), 9 * cin), f"{prefix}.conv{k}.w"))
            self.params.append(Parameter(np.zeros(cout), f"{prefix}.conv{k}.b"))

    def __call__(self, visual) -> Node:
        world = self.world
        n = visual.shape[0]
        h, cell = world.map_size, world.cell
        x = reshape(visual, (n, h, cell, h, cell, world.channels))
        x = tmean(x, axis=(2, 4))
        for k in range(3):
            x = conv2d(x, self.params[2 * k], self.params[2 * k + 1])
            if k < 2:
                x = relu(x)
        return x


class AudioEncoder:
    """g(a): (N, D) -> (N, E)"""

    def __init__(self, prefix: str, arch: Architecture, world: WorldConfig, embed_dim: int,
                 rng: np.random.Generator):
        d, hidden = world.audio_dim, arch.audio_hidden
        self.params: List[Parameter] = [
            Parameter(_he(rng, (d, hidden), d), f"{prefix}.fc1.w"),
            Parameter(np.zeros(hidden), f"{prefix}.fc1.b"),
            Parameter(_he(rng, (hidden, embed_dim), hidden), f"{prefix}.fc2.w"),
            Parameter(np.zeros(embed_dim), f"{prefix}.fc2.b"),
        ]

    def __call__(self, audio) -> Node:
        w1, b1, w2, b2 = self.params
        hidden = relu(matmul(audio, w1) + b1)
        return matmul(hidden, w2) + b2


class LocalizationNet:
    """One (audio, visual) encoder pair with a fixed architecture tag"""

    def __init__(self, name: str, arch_tag: str, world: WorldConfig, embed_dim: int, seed: int):
        if arch_tag not in ARCHITECTURES:
            raise PipelineError(f"Unknown architecture tag '{arch_tag}'")
        self.name = name
        self.arch = ARCHITECTURES[arch_tag]
        self.world = world
        self.embed_dim = embed_dim
        rng = np.random.default_rng([self.arch.seed, int(seed)])
        self.visual = VisualEncoder(f"{name}.visual", self.arch, world, embed_dim, rng)
        self.audio = AudioEncoder(f"{name}.audio", self.arch, world, embed_dim, rng)

    @property
    def params(self) -> List[Parameter]:
        return self.visual.params + self.audio.params

    def encode(self, visual, audio) -> Tuple[Node, Node]:
        return self.audio(audio), self.visual(visual)

    def forward(self, visual, audio) -> Node:
        """Predicted maps (N, H, W) for aligned (visual_i, audio_i)"""
        g, f = self.encode(visual, audio)
        return predicted_map(g, f)

    def predict(self, pairs: Sequence[AudioVisualPair]) -> np.ndarray:
        """Raw cosine maps for un-augmented pairs, evaluated without gradients"""
        maps = []
        for start in range(0, len(pairs), INFERENCE_CHUNK):
            chunk = pairs[start:start + INFERENCE_CHUNK]
            maps.append(self.forward(stack_visual(chunk), stack_audio(chunk)).value)
        if not maps:
            return np.zeros((0, self.world.map_size, self.world.map_size))
        return np.concatenate(maps, axis=0)

    def values(self) -> Dict[str, Tensor]:
        """Parameter values keyed by name relative to the network"""
        return {p.name[len(self.name) + 1:]: p.value for p in self.params}

    def load_values(self, values: Dict[str, Tensor]) -> None:
        for p in self.params:
            key = p.name[len(self.name) + 1:]
            if key not in values:
                raise PipelineError(f"{self.name}: missing parameter '{key}'")
            if values[key].shape != p.value.shape:
                raise PipelineError(f"{self.name}: shape mismatch for '{key}': "
                                    f"{values[key].shape} vs {p.value.shape}")
            p.value = np.array(values[key], dtype=np.float64)

    def copy_from(self, other: "LocalizationNet") -> None:
        if other.arch.tag != self.arch.tag:
            raise PipelineError(f"Cannot copy {other.name} ({other.arch.tag}) into {self.name} ({self.arch.tag})")
        self.load_values(other.values())


def stack_visual(pairs: Sequence[AudioVisualPair]) -> np.ndarray:
    return np.stack([p.visual for p in pairs])


def stack_audio(pairs: Sequence[AudioVisualPair]) -> np.ndarray:
    return np.stack([p.audio for p in pairs])


def predicted_map(g_a, f_v) -> Node:
    """
    Cosine similarity between an audio feature and every cell of a feature grid

    Shapes: g_a (..., E), f_v (..., H, W, E) -> (..., H, W). Zero-norm
    vectors give similarity 0.
    """
    g_a = g_a if isinstance(g_a, Node) else constant(g_a)
    f_v = f_v if isinstance(f_v, Node) else constant(f_v)
    if g_a.shape[-1] != f_v.shape[-1] or f_v.value.ndim != g_a.value.ndim + 2:
        raise PipelineError(f"predicted_map: feature dims disagree {g_a.shape} vs {f_v.shape}")
    gn = reshape(l2_normalize(g_a, axis=-1), g_a.shape[:-1] + (1, 1, g_a.shape[-1]))
    fn = l2_normalize(f_v, axis=-1)
    return tsum(mul(fn, gn), axis=-1)


def attention_pool(f_v, p) -> Node:
    """
    Softmax(P)-weighted sum of grid features

    Shapes: f_v (..., H, W, E), p (..., H, W) -> (..., E)
    """
    f_v = f_v if isinstance(f_v, Node) else constant(f_v)
    p = p if isinstance(p, Node) else constant(p)
    if f_v.shape[:-1] != p.shape:
        raise PipelineError(f"attention_pool: grid {f_v.shape} and map {p.shape} disagree")
    lead = p.shape[:-2]
    cells = p.shape[-2] * p.shape[-1]
    weights = softmax(reshape(p, lead + (1, cells)), axis=-1)
    pooled = matmul(weights, reshape(f_v, lead + (cells, f_v.shape[-1])))
    return reshape(pooled, lead + (f_v.shape[-1],))


def contrastive_scores(g: Node, f: Node) -> Node:
    """
    Match scores s[i, j] = cos(g_i, attention_pool(f_j, P_ij))

    Args:
        g: audio features (n, E)
        f: visual grids (n, H, W, E)

    Returns:
        Node: (n, n) score matrix, audio on rows
    """
    n, h, w, e = f.shape
    if g.shape != (n, e):
        raise PipelineError(f"contrastive_scores: audio {g.shape} vs visual {f.shape}")
    gn = l2_normalize(g, axis=-1)
    flat = reshape(f, (n, h * w, e))
    # cross[j, c, i] = P_ij at cell c
    cross = matmul(l2_normalize(flat, axis=-1), transpose(gn, (1, 0)))
    weights = softmax(transpose(cross, (0, 2, 1)), axis=-1)  # (j, i, HW)
    pooled = l2_normalize(matmul(weights, flat), axis=-1)  # (j, i, E)
    scores_ji = tsum(mul(pooled, reshape(gn, (1, n, e))), axis=-1)
    return transpose(scores_ji, (1, 0))


def info_nce(scores, temperature: float) -> Node:
    """Symmetric InfoNCE over an (n, n) score matrix with positives on the diagonal"""
    scores = scores if isinstance(scores, Node) else constant(scores)
    if scores.value.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise PipelineError(f"info_nce: expected a square score matrix, got {scores.shape}")
    n = scores.shape[0]
    if n < 2:
        raise PipelineError("contrastive loss needs a batch of at least 2 (no negatives)")
    if temperature <= 0:
        raise PipelineError(f"temperature must be positive, got {temperature}")
    logits = scalar_mul(scores, 1.0 / temperature)
    eye = constant(np.eye(n))
    a2v = tsum(mul(log_softmax(logits, axis=1), eye))
    v2a = tsum(mul(log_softmax(logits, axis=0), eye))
    return scalar_mul(a2v + v2a, -0.5 / n)


def contrastive_loss(net: LocalizationNet, visual, audio, temperature: float) -> Node:
    g, f = net.encode(visual, audio)
    if g.shape[0] < 2:
        raise PipelineError("contrastive loss needs a batch of at least 2 (no negatives)")
    return info_nce(contrastive_scores(g, f), temperature)


def supervised_map_loss(pred, target, scale: float = 0.25, bias: float = 0.0) -> Node:
    """
    Mean per-pixel BCE between a binary target and sigmoid((P - bias) / scale)

    Args:
        pred: predicted cosine maps (..., H, W)
        target: binary maps of the same shape
        scale: cosine units per logit
        bias: cosine value mapped to logit 0
    """
    pred = pred if isinstance(pred, Node) else constant(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise PipelineError(f"supervised_map_loss: pred {pred.shape} vs target {target.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise PipelineError("supervised_map_loss: target must be binary")
    z = scalar_mul(pred + (-bias), 1.0 / scale)
    return bce_logits(z, constant(target))
