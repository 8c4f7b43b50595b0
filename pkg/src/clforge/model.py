"""Bi-modal segmenter: patch MLP over the image, word-bag text encoder,
FiLM fusion, per-patch decoder.

The architecture is deliberately local: each 4x4 patch is embedded, refined
by two residual feed-forward blocks, modulated per channel by the prompt
embedding (scale and shift), and decoded back to 16 logits. Text and vision
never exchange spatial information, which keeps the model small enough for
exhaustive gradient checking.

The text embedding table is initialised so that the template words used by
the committed task suites are pairwise orthogonal, plus a small common bias
direction. Prompt cosine similarity is then approximately the fraction of
shared words, which is what the adapter allocation rule keys on, and it is
strictly positive even for disjoint prompts.
"""

from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor, no_grad
from .losses import batched_losses
from .optim import AdamW

# Words the committed suites draw prompts from; embedded pairwise orthogonal.
CONTENT_WORDS = [
    "one", "two", "single", "lone", "some",
    "small", "large", "tiny", "wide", "thin", "flat", "hollow", "round",
    "oval", "rough", "dense",
    "disc", "ellipse", "ring", "bar", "blob", "cross",
    "left", "right", "center", "top", "bottom", "anywhere",
]

FILLER_WORDS = [
    "<unk>", "object", "shape", "region", "target", "thing", "item", "area",
    "figure", "plain", "noisy", "smooth", "dark", "bright", "speckled",
    "grainy", "the", "a", "in", "of", "on", "at", "image", "located",
    "segment", "find", "mark", "spot", "many", "medium", "narrow", "solid",
    "faint", "curved", "straight", "textured",
]

VOCAB = CONTENT_WORDS + FILLER_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
UNK_ID = WORD_TO_ID["<unk>"]

EMBED_BIAS = 0.15  # common component keeping all prompt cosines positive

PRETRAIN_SEED = 7  # one pretrained backbone shared by every experiment seed

IMAGE_SIDE = 32
PATCH = 4
N_PATCHES = (IMAGE_SIDE // PATCH) ** 2
PATCH_PIXELS = PATCH * PATCH


class PretrainGateError(RuntimeError):
    """Pretraining failed its validation Dice gate."""


class FreezeViolation(AssertionError):
    """A frozen base weight changed after pretraining."""


def tokenize(prompt):
    """Whitespace tokenizer over the closed vocabulary; unknowns map to UNK."""
    words = prompt.lower().split()
    if not words:
        raise ValueError("empty prompt")
    return [WORD_TO_ID.get(w, UNK_ID) for w in words]


def patchify(images):
    """(32, 32) or (B, 32, 32) -> (B * 64, 16) row-major patch stack."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    b = arr.shape[0]
    g = IMAGE_SIDE // PATCH
    out = arr.reshape(b, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(out.reshape(b * N_PATCHES, PATCH_PIXELS))


def patchify_masks(masks):
    """Masks in the same flattened layout as logits: (B, 1024)."""
    arr = np.asarray(masks, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return patchify(arr).reshape(arr.shape[0], N_PATCHES * PATCH_PIXELS)


@dataclass
class PromptEmbedding:
    """Unit-norm text feature from the frozen encoder."""
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        n = float(np.linalg.norm(self.vector))
        if not (abs(n - 1.0) < 1e-9):
            raise ValueError(f"prompt embedding norm {n} is not 1")


class BiModalSegmenter:
    """Prompt-conditioned segmenter over 32x32 single-channel images."""

    SHARED_NAMES = ("fusion.w_f", "decoder.w_d")

    def __init__(self, params, d_v, d_t):
        self.params = params
        self.d_v = d_v
        self.d_t = d_t
        self.frozen = False
        self._base_ref = None

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, seed, d_v=32, d_t=32):
        if d_t < len(CONTENT_WORDS) + 2:
            raise ValueError("text width too small for the template vocabulary")
        rng = np.random.default_rng(seed)
        p = {}
        p["vision.patch_embed"] = rng.normal(
            0, np.sqrt(2.0 / PATCH_PIXELS), (PATCH_PIXELS, d_v))
        for blk in (0, 1):
            p[f"vision.block{blk}.w1"] = rng.normal(
                0, np.sqrt(2.0 / d_v), (d_v, 2 * d_v))
            p[f"vision.block{blk}.w2"] = rng.normal(
                0, np.sqrt(2.0 / (2 * d_v)), (2 * d_v, d_v))
        p["text.embed"] = cls._init_embed(rng, d_t)
        p["text.w1"] = rng.normal(0, 0.02, (d_t, 2 * d_t))
        p["text.w2"] = rng.normal(0, 0.02, (2 * d_t, d_t))
        p["fusion.w_f"] = rng.normal(0, 0.02, (d_t, 2 * d_v))
        p["decoder.w_d"] = rng.normal(0, np.sqrt(1.0 / d_v), (d_v, 16))
        params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        return cls(params, d_v, d_t)

    @staticmethod
    def _init_embed(rng, d_t):
        # Content words: orthonormal rows in the first d_t - 1 dims, mixed
        # with a shared bias axis; fillers: random unit rows, same mix.
        sub = d_t - 1
        q, _ = np.linalg.qr(rng.normal(size=(sub, sub)))
        rows = np.zeros((len(VOCAB), d_t))
        for i in range(len(CONTENT_WORDS)):
            rows[i, :sub] = q[i]
        for i in range(len(CONTENT_WORDS), len(VOCAB)):
            v = rng.normal(size=sub)
            rows[i, :sub] = v / np.linalg.norm(v)
        rows[:, sub] = EMBED_BIAS
        rows /= np.sqrt(1.0 + EMBED_BIAS ** 2)
        return rows

    # -- parameter bookkeeping ----------------------------------------------

    @property
    def base_names(self):
        return tuple(n for n in self.params if n not in self.SHARED_NAMES)

    @property
    def lora_targets(self):
        """Adapter-eligible matrices, name -> (in_features, out_features)."""
        names = ("vision.block0.w1", "vision.block0.w2",
                 "vision.block1.w1", "vision.block1.w2",
                 "text.w1", "text.w2")
        return {n: self.params[n].shape for n in names}

    def shared_params(self):
        return {n: self.params[n] for n in self.SHARED_NAMES}

    def total_parameters(self):
        return sum(p.size for p in self.params.values())

    def freeze_base(self):
        for n in self.base_names:
            self.params[n].requires_grad = False
        self._base_ref = {n: self.params[n].data.copy()
                          for n in self.base_names}
        self.frozen = True

    def check_base_intact(self):
        """Bitwise comparison against the values frozen at pretraining."""
        if not self.frozen:
            raise RuntimeError("base is not frozen")
        for n, ref in self._base_ref.items():
            if not np.array_equal(self.params[n].data, ref):
                raise FreezeViolation(f"frozen weight {n} changed")

    def state_arrays(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for n, p in self.params.items():
            if n not in arrays:
                raise KeyError(f"missing weight {n}")
            if arrays[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}")
            p.data = np.array(arrays[n], dtype=np.float64)
        if self.frozen:
            self._base_ref = {n: self.params[n].data.copy()
                              for n in self.base_names}

    # -- text path ----------------------------------------------------------

    def _text_feature(self, token_ids, weights):
        onehot = np.zeros((len(token_ids), len(VOCAB)))
        onehot[np.arange(len(token_ids)), token_ids] = 1.0
        h = (Tensor(onehot) @ weights["text.embed"]).mean(axis=0) \
            .reshape((1, self.d_t))
        m = (h @ weights["text.w1"]).relu() @ weights["text.w2"]
        e = h + m
        norm = e.square().sum().sqrt()
        return e / norm

    def embed_text(self, prompt):
        """Frozen-encoder unit-norm embedding used for adapter allocation."""
        tokens = tokenize(prompt)
        with no_grad():
            e = self._text_feature(tokens, self.params)
        return PromptEmbedding(e.data.reshape(-1).copy())

    # -- forward ------------------------------------------------------------

    def _weights_with(self, adapter):
        if adapter is None:
            return self.params
        eff = dict(self.params)
        eff.update(adapter.apply(
            {n: self.params[n] for n in self.lora_targets}))
        return eff

    def forward_patches(self, patch_stack, token_ids, adapter=None):
        """Stacked forward pass: (B * 64, 16) patches -> (B * 64, 16) logits.

        All rows share one prompt, so FiLM scale/shift broadcast across the
        whole stack.
        """
        w = self._weights_with(adapter)
        x = Tensor(patch_stack) @ w["vision.patch_embed"]
        for blk in (0, 1):
            x = x + (x @ w[f"vision.block{blk}.w1"]).relu() \
                @ w[f"vision.block{blk}.w2"]
        e = self._text_feature(token_ids, w)
        film = (e @ w["fusion.w_f"]).reshape((2, self.d_v))
        x = x * (1.0 + film[0]) + film[1]
        return x @ w["decoder.w_d"]

    def forward(self, image, prompt, adapter=None):
        """Single image + prompt -> (32, 32) logit grid."""
        logits = self.forward_patches(patchify(image), tokenize(prompt),
                                      adapter)
        g = IMAGE_SIDE // PATCH
        return logits.reshape((g, g, PATCH, PATCH)) \
            .permute((0, 2, 1, 3)).reshape((IMAGE_SIDE, IMAGE_SIDE))


def predict_masks(model, images, prompt, adapter=None):
    """Binarised predictions for a batch, as (B, 1024) patch-layout bools."""
    tokens = tokenize(prompt) if isinstance(prompt, str) else prompt
    n = 1 if np.asarray(images).ndim == 2 else np.asarray(images).shape[0]
    with no_grad():
        logits = model.forward_patches(patchify(images), tokens, adapter)
    return logits.data.reshape(n, -1) > 0.0


def pretrain_base(train_samples, val_samples, steps=2000, seed=PRETRAIN_SEED,
                  d_v=32, d_t=32, batch_size=16, lr=8e-4, weight_decay=8e-5,
                  gate=0.6):
    """Train the backbone on the generic pretext task, then freeze it.

    The text mixing matrices stay at their small random initialisation: the
    pretext prompt is a single constant word, so they receive no useful
    signal, and leaving them untouched keeps prompt similarity governed by
    the embedding table. Downstream tasks adapt them through their low-rank
    adapters instead.
    """
    from .metrics import dice as dice_score

    model = BiModalSegmenter.build(seed=seed, d_v=d_v, d_t=d_t)
    tokens = tokenize("object")
    trained = [n for n in model.params
               if n not in ("text.w1", "text.w2")]
    opt = AdamW({n: model.params[n] for n in trained}, lr=lr,
                weight_decay=weight_decay)

    images = np.stack([s.image for s in train_samples])
    masks = patchify_masks(np.stack([s.mask for s in train_samples]))
    rng = np.random.default_rng(seed + 1)
    n = len(train_samples)

    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        stack = patchify(images[idx])
        logits = model.forward_patches(stack, tokens)
        ce, dc = batched_losses(logits, masks[idx])
        loss = ce + dc
        opt.zero_grad()
        loss.backward()
        opt.step()

    val_images = np.stack([s.image for s in val_samples])
    val_masks = patchify_masks(np.stack([s.mask for s in val_samples]))
    preds = predict_masks(model, val_images, tokens)
    val_dice = float(np.mean([
        dice_score(preds[i], val_masks[i] > 0.5) for i in range(len(preds))]))
    if not (val_dice > gate):
        raise PretrainGateError(
            f"pretext validation Dice {val_dice:.4f} did not clear the "
            f"{gate} gate after {steps} steps; the backbone is unusable")

    model.freeze_base()
    return model, val_dice


_PRETRAIN_CACHE = {}


def pretrained_base(pretext, steps=2000, seed=PRETRAIN_SEED, d_v=32, d_t=32):
    """Process-wide cached pretrained backbone; returns a fresh copy."""
    key = (seed, steps, d_v, d_t, len(pretext["train"]), len(pretext["val"]))
    if key not in _PRETRAIN_CACHE:
        model, val_dice = pretrain_base(pretext["train"], pretext["val"],
                                        steps=steps, seed=seed, d_v=d_v,
                                        d_t=d_t)
        _PRETRAIN_CACHE[key] = (model.state_arrays(), val_dice)
    arrays, val_dice = _PRETRAIN_CACHE[key]
    model = BiModalSegmenter.build(seed=seed, d_v=d_v, d_t=d_t)
    model.load_state_arrays(arrays)
    model.freeze_base()
    return model, val_dice
