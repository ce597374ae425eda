"""Toy differentiable multimodal transformer and the attack-target contract.

The model consumes an image plus integer token sequences: the image is cut
into non-overlapping patches and linearly embedded, instruction-token
embeddings are prepended, and teacher-forced target tokens are appended.
The stack is L pre-norm transformer blocks with single-head attention and a
tied output projection.  Everything is float64 numpy with exact image
gradients supplied by :mod:`force_lab.autodiff`; model parameters are plain
constants, so only activations carry graph nodes.

Images are C, H, W arrays.  Valid pixel range is [0, 1]; forward passes
accept any finite values so that unclamped reference points (image + noise)
can be evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "ShapeError",
    "TokenSequence",
    "instruction_tokens",
    "target_tokens",
    "ModelSpec",
    "ForwardTrace",
    "FeatureOverride",
    "WeightPerturbation",
    "ToyMultimodalLM",
    "perturb_weights",
    "blank_image",
]

LN_EPS = 1e-6
MLP_RATIO = 4

_IMAGE_DIM_NAMES = ("channels", "height", "width")


class ShapeError(ValueError):
    """An input array does not match the shape the model declares."""


@dataclass(frozen=True)
class TokenSequence:
    """Integer token ids with their conversational role."""

    ids: tuple[int, ...]
    role: str = "instruction"

    def __post_init__(self):
        if self.role not in ("instruction", "target"):
            raise ValueError(f"unknown token role {self.role!r}")
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if any(i < 0 for i in self.ids):
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)


def instruction_tokens(ids: Sequence[int]) -> TokenSequence:
    return TokenSequence(tuple(ids), "instruction")


def target_tokens(ids: Sequence[int]) -> TokenSequence:
    return TokenSequence(tuple(ids), "target")


@dataclass(frozen=True)
class ModelSpec:
    """Deterministic recipe for a toy model; same spec, same parameters."""

    layers: int = 8
    embed_dim: int = 32
    vocab: int = 64
    patch: int = 8
    seed: int = 0
    channels: int = 3
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("layers must be >= 2")
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")
        for name in ("vocab", "patch", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.height < self.patch or self.width < self.patch:
            raise ValueError("image must fit at least one patch")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def to_config_text(self) -> str:
        lines = [
            f"layers = {self.layers}",
            f"embed_dim = {self.embed_dim}",
            f"vocab = {self.vocab}",
            f"patch = {self.patch}",
            f"seed = {self.seed}",
        ]
        if (self.channels, self.height, self.width) != (3, 32, 32):
            lines += [
                f"channels = {self.channels}",
                f"height = {self.height}",
                f"width = {self.width}",
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config_text(cls, text: str) -> "ModelSpec":
        known = {
            "layers", "embed_dim", "vocab", "patch", "seed",
            "channels", "height", "width",
        }
        values: dict[str, int] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ValueError(f"unknown model spec key {key!r}")
            try:
                values[key] = int(val.strip())
            except ValueError:
                raise ValueError(f"model spec key {key!r} needs an integer, got {val.strip()!r}") from None
        return cls(**values)


@dataclass
class ForwardTrace:
    """Per-layer features, target log-probabilities and the scalar loss."""

    layer_features: list[np.ndarray]
    target_logprobs: np.ndarray
    loss: float


@dataclass(frozen=True)
class FeatureOverride:
    """Replace layer `layer_index`'s activations before the next block runs."""

    layer_index: int
    replacement: np.ndarray


@dataclass(frozen=True)
class WeightPerturbation:
    """Additive elementwise-uniform direction applied to every parameter."""

    direction_seed: int
    magnitude: float

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")


@dataclass
class _GraphForward:
    """Live graph handles for one forward pass (internal)."""

    features: list  # list[ad.Tensor], one per layer, post-block
    target_logprobs: "ad.Tensor"
    loss: "ad.Tensor"
    target_argmax: np.ndarray


def _sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * -(np.log(10000.0) / dim))
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(position * div)
    enc[:, 1::2] = np.cos(position * div[: enc[:, 1::2].shape[1]])
    return enc


class ToyMultimodalLM:
    """A small deterministic multimodal transformer with exact gradients.

    Instances are immutable after construction; weight perturbation returns
    a fresh instance, so concurrent forward/gradient calls are safe.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self._pos_cache: dict[int, np.ndarray] = {}
        self._mask_cache: dict[int, np.ndarray] = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "ToyMultimodalLM":
        rng = np.random.default_rng(spec.seed)
        d = spec.embed_dim
        hidden = MLP_RATIO * d
        patch_in = spec.channels * spec.patch * spec.patch
        params: dict[str, np.ndarray] = {}
        params["embed"] = rng.normal(0.0, 0.5, size=(spec.vocab, d))
        # keep patch embeddings on the same footing as token embeddings:
        # pixel values sit in [0,1], so scale by the patch vector length
        params["patch_w"] = rng.normal(0.0, np.sqrt(3.0 / patch_in), size=(patch_in, d))
        params["patch_b"] = np.zeros(d)
        for l in range(spec.layers):
            params[f"blk{l}.ln1_g"] = np.ones(d)
            params[f"blk{l}.ln1_b"] = np.zeros(d)
            params[f"blk{l}.wq"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            params[f"blk{l}.wk"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            params[f"blk{l}.wv"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            params[f"blk{l}.wo"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            params[f"blk{l}.ln2_g"] = np.ones(d)
            params[f"blk{l}.ln2_b"] = np.zeros(d)
            params[f"blk{l}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden))
            params[f"blk{l}.b1"] = np.zeros(hidden)
            params[f"blk{l}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d))
            params[f"blk{l}.b2"] = np.zeros(d)
        params["lnf_g"] = np.ones(d)
        params["lnf_b"] = np.zeros(d)
        return cls(spec, params)

    def perturbed(self, wp: WeightPerturbation) -> "ToyMultimodalLM":
        """A new model with every parameter shifted by magnitude * U(-1, 1)."""
        if wp.magnitude == 0.0:
            return ToyMultimodalLM(self.spec, dict(self.params))
        rng = np.random.default_rng(wp.direction_seed)
        shifted = {
            name: value + wp.magnitude * rng.uniform(-1.0, 1.0, size=value.shape)
            for name, value in self.params.items()
        }
        return ToyMultimodalLM(self.spec, shifted)

    # -- validation helpers ------------------------------------------------

    @property
    def num_patches(self) -> int:
        return (self.spec.height // self.spec.patch) * (self.spec.width // self.spec.patch)

    def validate_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        want = self.spec.image_shape
        if image.ndim != 3:
            raise ShapeError(f"image must have 3 dimensions (C, H, W), got {image.ndim}")
        for axis, name in enumerate(_IMAGE_DIM_NAMES):
            if image.shape[axis] != want[axis]:
                raise ShapeError(
                    f"image {name} is {image.shape[axis]}, model expects {want[axis]}"
                )
        return image

    def _validate_tokens(self, seq: TokenSequence, expect_role: str) -> np.ndarray:
        if seq.role != expect_role:
            raise ValueError(f"expected a {expect_role} sequence, got role {seq.role!r}")
        ids = np.asarray(seq.ids, dtype=np.intp)
        if ids.size and ids.max() >= self.spec.vocab:
            raise ValueError(
                f"token id {int(ids.max())} out of range for vocab {self.spec.vocab}"
            )
        return ids

    def _validate_override(self, override: FeatureOverride, seq_len: int) -> np.ndarray:
        if not 0 <= override.layer_index < self.spec.layers:
            raise ValueError(
                f"override layer {override.layer_index} out of range [0, {self.spec.layers})"
            )
        rep = np.asarray(override.replacement, dtype=np.float64)
        want = (seq_len, self.spec.embed_dim)
        if rep.shape != want:
            raise ShapeError(f"override replacement shape {rep.shape} != layer shape {want}")
        return rep

    # -- forward machinery ---------------------------------------------------

    def _positions(self, length: int) -> np.ndarray:
        if length not in self._pos_cache:
            self._pos_cache[length] = _sinusoidal_positions(length, self.spec.embed_dim)
        return self._pos_cache[length]

    def _causal_mask(self, length: int) -> np.ndarray:
        if length not in self._mask_cache:
            mask = np.triu(np.full((length, length), -1e9), k=1)
            self._mask_cache[length] = mask
        return self._mask_cache[length]

    def _patch_tokens(self, image) -> "ad.Tensor":
        p = self.spec.patch
        c, h, w = self.spec.image_shape
        nh, nw = h // p, w // p
        cropped = ad.getitem(image, (slice(None), slice(0, nh * p), slice(0, nw * p)))
        blocks = ad.reshape(cropped, (c, nh, p, nw, p))
        blocks = ad.transpose(blocks, (1, 3, 0, 2, 4))
        patches = ad.reshape(blocks, (nh * nw, c * p * p))
        return ad.add(ad.matmul(patches, self.params["patch_w"]), self.params["patch_b"])

    def _block(self, x, l: int):
        P = self.params
        scale = 1.0 / np.sqrt(self.spec.embed_dim)
        mask = self._causal_mask(x.shape[0])
        h = ad.layer_norm(x, P[f"blk{l}.ln1_g"], P[f"blk{l}.ln1_b"], LN_EPS)
        q = ad.matmul(h, P[f"blk{l}.wq"])
        k = ad.matmul(h, P[f"blk{l}.wk"])
        v = ad.matmul(h, P[f"blk{l}.wv"])
        scores = ad.add(ad.mul(ad.matmul(q, ad.transpose2d(k)), scale), mask)
        attn = ad.softmax(scores, axis=-1)
        x = ad.add(x, ad.matmul(ad.matmul(attn, v), P[f"blk{l}.wo"]))
        h = ad.layer_norm(x, P[f"blk{l}.ln2_g"], P[f"blk{l}.ln2_b"], LN_EPS)
        m = ad.relu(ad.add(ad.matmul(h, P[f"blk{l}.w1"]), P[f"blk{l}.b1"]))
        m = ad.add(ad.matmul(m, P[f"blk{l}.w2"]), P[f"blk{l}.b2"])
        return ad.add(x, m)

    def _stack(self, image, instr_ids: np.ndarray, post_ids: np.ndarray,
               override: FeatureOverride | None = None):
        """Run the block stack; returns (per-layer features, full logits)."""
        E = self.params["embed"]
        parts = []
        if instr_ids.size:
            parts.append(E[instr_ids])
        parts.append(self._patch_tokens(image))
        if post_ids.size:
            parts.append(E[post_ids])
        x = ad.concat_rows(parts) if len(parts) > 1 else parts[0]
        seq_len = x.shape[0]
        x = ad.add(x, self._positions(seq_len))

        rep = None
        if override is not None:
            rep = self._validate_override(override, seq_len)

        features = []
        for l in range(self.spec.layers):
            x = self._block(x, l)
            if rep is not None and l == override.layer_index:
                x = ad.Tensor(rep)  # injected features detach the graph here
            features.append(x)

        final = ad.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"], LN_EPS)
        logits = ad.matmul(final, E.T)
        return features, logits

    def _forward_graph(self, image, instruction: TokenSequence, target: TokenSequence,
                       override: FeatureOverride | None = None) -> _GraphForward:
        instr_ids = self._validate_tokens(instruction, "instruction")
        tgt_ids = self._validate_tokens(target, "target")
        if tgt_ids.size == 0:
            raise ValueError("target sequence must be non-empty")

        features, logits = self._stack(image, instr_ids, tgt_ids, override)
        prefix = instr_ids.size + self.num_patches
        rows = ad.getitem(logits, slice(prefix - 1, prefix + tgt_ids.size - 1))
        logprobs = ad.gather_pairs(ad.log_softmax(rows), np.arange(tgt_ids.size), tgt_ids)
        loss = ad.neg(ad.total(logprobs))
        argmax = np.argmax(rows.value, axis=1)
        return _GraphForward(features, logprobs, loss, argmax)

    # -- public operations ---------------------------------------------------

    def forward(self, image: np.ndarray, instruction: TokenSequence,
                target: TokenSequence, override: FeatureOverride | None = None) -> ForwardTrace:
        """Teacher-forced forward pass; loss is -sum of target log-probs."""
        image = self.validate_image(image)
        g = self._forward_graph(image, instruction, target, override)
        logprobs = g.target_logprobs.value.copy()
        return ForwardTrace(
            layer_features=[f.value.copy() for f in g.features],
            target_logprobs=logprobs,
            loss=float(-np.sum(logprobs)),
        )

    def loss_and_gradient(self, image: np.ndarray, instruction: TokenSequence,
                          target: TokenSequence) -> tuple[float, np.ndarray, bool]:
        """Loss, d(loss)/d(image), and whether teacher-forced argmax hits the target.

        The boolean equals `greedy_decode(...)[:S] == target` (causal masking
        makes teacher forcing and greedy decoding agree token-for-token).
        """
        image = self.validate_image(image)
        x = ad.leaf(image)
        g = self._forward_graph(x, instruction, target)
        g.loss.backward()
        matched = bool(np.array_equal(g.target_argmax, np.asarray(target.ids)))
        return float(g.loss.value), x.grad, matched

    def image_gradient(self, image: np.ndarray, instruction: TokenSequence,
                       target: TokenSequence) -> np.ndarray:
        """Exact d(loss)/d(image), same shape as the image."""
        return self.loss_and_gradient(image, instruction, target)[1]

    def objective_eval(self, jail: np.ndarray, refs: Sequence[np.ndarray],
                       instruction: TokenSequence, target: TokenSequence,
                       lambdas: np.ndarray, d_floor: float,
                       ) -> tuple[np.ndarray, float, float]:
        """Gradient and value of the composite loss ce + reg.

        `refs` are the reference images jail + eta_n; their offsets from
        `jail` are held fixed, so the gradient flows through the jailbreak
        branch and every reference branch.  Returns (gradient, ce, reg).
        """
        jail = self.validate_image(jail)
        lambdas = np.asarray(lambdas, dtype=np.float64)
        if lambdas.shape != (self.spec.layers,):
            raise ValueError(
                f"need one regularizer weight per layer, got shape {lambdas.shape}"
            )
        active = [l for l in range(self.spec.layers) if lambdas[l] != 0.0]
        if active and not refs:
            raise ValueError("reference images required when regularization is enabled")

        x = ad.leaf(jail)
        gj = self._forward_graph(x, instruction, target)
        if not active:
            gj.loss.backward()
            self._check_finite(gj.loss.value, x.grad)
            return x.grad, float(gj.loss.value), 0.0

        terms = []
        for ref in refs:
            ref = self.validate_image(ref)
            noise = ref - jail  # fixed offset; d ref / d jail = identity
            gr = self._forward_graph(ad.add(x, noise), instruction, target)
            for l in active:
                diff = ad.sub(gj.features[l], gr.features[l])
                dist = ad.maximum_const(ad.total(ad.mul(diff, diff)), d_floor)
                terms.append(ad.div(ad.mul(gr.loss, lambdas[l]), dist))
        reg = ad.mul(_sum_tensors(terms), 1.0 / len(refs))
        composite = ad.add(gj.loss, reg)
        composite.backward()
        self._check_finite(composite.value, x.grad)
        return x.grad, float(gj.loss.value), float(reg.value)

    def objective_gradient(self, jail: np.ndarray, refs: Sequence[np.ndarray],
                           instruction: TokenSequence, target: TokenSequence,
                           lambdas: np.ndarray, d_floor: float) -> np.ndarray:
        """d(ce + reg)/d(image) for the composite attack objective."""
        return self.objective_eval(jail, refs, instruction, target, lambdas, d_floor)[0]

    @staticmethod
    def _check_finite(loss_value, grad: np.ndarray) -> None:
        if not np.isfinite(loss_value) or not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite value in objective evaluation")

    def greedy_decode(self, image: np.ndarray, instruction: TokenSequence,
                      max_len: int) -> TokenSequence:
        """Deterministic argmax decoding; ties resolve to the lowest token id."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        image = self.validate_image(image)
        instr_ids = self._validate_tokens(instruction, "instruction")
        decoded: list[int] = []
        for _ in range(max_len):
            post = np.asarray(decoded, dtype=np.intp)
            _, logits = self._stack(image, instr_ids, post)
            decoded.append(int(np.argmax(logits.value[-1])))
        return TokenSequence(tuple(decoded), "target")


def _sum_tensors(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def perturb_weights(spec: ModelSpec, wp: WeightPerturbation) -> ToyMultimodalLM:
    """Build the model `spec` describes and apply the weight perturbation."""
    return ToyMultimodalLM.from_spec(spec).perturbed(wp)


def blank_image(spec: ModelSpec) -> np.ndarray:
    """The grey start image used by the blank-initialization setting."""
    return np.full(spec.image_shape, 128.0 / 255.0)
