"""Feature embedding: small conv nets, auxiliary pre-training, cosine
distance, input gradients, checkpoints, and feature export.

Architectures (norm-free so checkpoints are a flat parameter payload):
  conv3      3 conv layers (5x5 stride-2 local filter bank into two 1x1
             mixing layers, 48/96/128 channels, ReLU) + per-channel
             global max-pool; feature_dim 128. Default. The receptive
             field (5 px) stays below the default trigger patch and the
             spatial max-pool keeps the feature sensitive to a small
             local patch; wide-field averaging architectures dilute a
             corner patch at desk scale until trigger optimization has
             no gradient to work with.
  resnet12   4 residual stages of 3 convs (16/32/64/128) + global
             max-pool; feature_dim 128. Config-selectable alternative.
  identity   flattens the image to the feature vector (oracle tests).
  identity2x identity scaled by 2 (ensemble oracle tests).

Cosine distance everywhere is
    d(a, b) = 1 - a.b / ((|a| + 1e-12) * (|b| + 1e-12))
with the 1e-12 epsilon inside each norm denominator; oracles must use the
same formula.
"""

import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArtifactError, ConfigurationError, InputError, NumericError, TrainingError

NORM_EPS = 1e-12

CHECKPOINT_MAGIC = "FSBK-EMBED"
CHECKPOINT_VERSION = 1

_NP_DTYPES = {"float32": np.float32, "float64": np.float64}
_T_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class _Conv3(nn.Module):
    def __init__(self, in_channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, 48, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(48, 96, 1),
            nn.ReLU(),
            nn.Conv2d(96, 128, 1),
            nn.ReLU(),
        )

    def forward(self, x):
        h = self.body(x)
        return h.amax(dim=(2, 3))


class _ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.c3 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = F.relu(self.c1(x))
        h = F.relu(self.c2(h))
        h = self.c3(h)
        return F.max_pool2d(F.relu(h + self.skip(x)), 2, ceil_mode=True)


class _ResNet12(nn.Module):
    def __init__(self, in_channels):
        super().__init__()
        chans = (16, 32, 64, 128)
        blocks, prev = [], in_channels
        for c in chans:
            blocks.append(_ResBlock(prev, c))
            prev = c
        self.body = nn.Sequential(*blocks)

    def forward(self, x):
        h = self.body(x)
        return h.amax(dim=(2, 3))


class _Identity(nn.Module):
    def __init__(self, scale=1.0):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return x.reshape(x.shape[0], -1) * self.scale


def _arch_feature_dim(arch, input_shape):
    h, w, c = input_shape
    if arch == "conv3":
        return 128
    if arch == "resnet12":
        return 128
    if arch in ("identity", "identity2x"):
        return h * w * c
    raise ConfigurationError(f"unknown architecture '{arch}'")


def _build_module(arch, input_shape):
    c = input_shape[2]
    if arch == "conv3":
        return _Conv3(c)
    if arch == "resnet12":
        return _ResNet12(c)
    if arch == "identity":
        return _Identity(1.0)
    if arch == "identity2x":
        return _Identity(2.0)
    raise ConfigurationError(f"unknown architecture '{arch}'")


def _init_params(module, seed):
    # Explicit generator-driven init: independent of global RNG state.
    g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    for name, p in module.named_parameters():
        if p.dim() > 1:
            fan_in = p[0].numel()
        else:
            fan_in = max(1, p.numel())
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            p.uniform_(-bound, bound, generator=g)


class EmbeddingModel:
    """A (possibly frozen) differentiable map from images to feature vectors.

    Images cross the boundary as numpy H x W x C; internally NCHW tensors.
    """

    def __init__(self, arch, input_shape, seed=0, dtype="float32", frozen=False):
        self.arch = arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self.feature_dim = _arch_feature_dim(arch, self.input_shape)
        self.dtype_name = dtype
        self.torch_dtype = _T_DTYPES[dtype]
        self.seed = int(seed)
        self.module = _build_module(arch, self.input_shape).to(self.torch_dtype)
        _init_params(self.module, seed)
        self.module.eval()
        self.frozen = frozen
        self.probe_accuracy = None
        self.loss_trace = []

    # -- forward ---------------------------------------------------------

    def check_input(self, image):
        arr = np.asarray(image)
        if tuple(arr.shape) != self.input_shape:
            raise InputError(f"image shape {arr.shape} != model input {self.input_shape}")
        return arr

    def forward_t(self, images_hwc):
        """(N, H, W, C) tensor -> (N, D) features; differentiable."""
        x = images_hwc.permute(0, 3, 1, 2)
        return self.module(x)

    def to_tensor(self, images):
        arr = np.stack([self.check_input(im) for im in images])
        return torch.as_tensor(arr, dtype=self.torch_dtype)

    def embed_batch(self, images):
        with torch.no_grad():
            feats = self.forward_t(self.to_tensor(images))
        return feats.numpy()

    def embed(self, image):
        return self.embed_batch([image])[0]

    # -- parameters ------------------------------------------------------

    def param_vector(self):
        parts = [p.detach().numpy().ravel() for _, p in self.module.named_parameters()]
        if not parts:
            return np.zeros(0, dtype=_NP_DTYPES[self.dtype_name])
        return np.concatenate(parts).astype(_NP_DTYPES[self.dtype_name])

    def load_param_vector(self, flat):
        offset = 0
        with torch.no_grad():
            for _, p in self.module.named_parameters():
                n = p.numel()
                chunk = flat[offset : offset + n]
                if chunk.size != n:
                    raise ArtifactError("parameter payload truncated")
                p.copy_(torch.as_tensor(chunk.reshape(tuple(p.shape)), dtype=self.torch_dtype))
                offset += n
        if offset != flat.size:
            raise ArtifactError(f"parameter payload has {flat.size - offset} extra values")

    def param_hash(self):
        return hashlib.sha256(self.param_vector().tobytes()).hexdigest()


def embed(model, image):
    """Feature vector of one image. Deterministic; batch-consistent."""
    return model.embed(image)


def cosine_distance(a, b):
    """1 - cos(a, b) in [0, 2]; epsilon 1e-12 inside each norm denominator."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine_distance: zero-norm input")
    return 1.0 - float(a @ b) / ((na + NORM_EPS) * (nb + NORM_EPS))


def cosine_distance_t(a, b):
    """Torch cosine distance with the same epsilon convention; broadcasts
    over leading dimensions (features on the last axis)."""
    num = (a * b).sum(dim=-1)
    den = (a.norm(dim=-1) + NORM_EPS) * (b.norm(dim=-1) + NORM_EPS)
    return 1.0 - num / den


def grad_wrt_input(model, loss_fn, image):
    """d loss / d pixels for a scalar torch functional of the feature vector.

    `loss_fn` receives the (D,) feature tensor and must return a scalar
    tensor built from torch ops.
    """
    arr = model.check_input(image)
    x = torch.as_tensor(np.asarray(arr), dtype=model.torch_dtype).clone().requires_grad_(True)
    feat = model.forward_t(x.unsqueeze(0))[0]
    loss = loss_fn(feat)
    (grad,) = torch.autograd.grad(loss, x)
    g = grad.detach().numpy()
    if not np.isfinite(g).all():
        raise NumericError("grad_wrt_input: non-finite gradient")
    return g


# -- pre-training ---------------------------------------------------------


@dataclass
class PretrainConfig:
    arch: str = "conv3"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    head_scale: float = 10.0
    val_fraction: float = 0.2
    optimizer: str = "adam"
    min_probe_acc: float = None
    seed: int = 0


def _cosine_logits(feats, weights, scale):
    f = feats / (feats.norm(dim=1, keepdim=True) + NORM_EPS)
    w = weights / (weights.norm(dim=1, keepdim=True) + NORM_EPS)
    return scale * f @ w.t()


def pretrain_embedding(auxiliary, cfg):
    """Train the embedding on the auxiliary split with a cosine-similarity
    classifier head and cross-entropy; returns a frozen model.

    A per-class tail slice (val_fraction) is held out; the trained head's
    accuracy on it is recorded as `probe_accuracy`.
    """
    by_class = auxiliary.by_class()
    classes = sorted(by_class)
    if len(classes) < 2:
        raise ConfigurationError("pre-training needs at least 2 auxiliary classes")
    if any(len(v) == 0 for v in by_class.values()):
        raise ConfigurationError("pre-training needs a non-empty auxiliary split")

    train_x, train_y, held_x, held_y = [], [], [], []
    for yi, cls in enumerate(classes):
        examples = by_class[cls]
        n_held = int(math.ceil(cfg.val_fraction * len(examples))) if cfg.epochs > 0 else 0
        n_held = min(n_held, len(examples) - 1) if len(examples) > 1 else 0
        cut = len(examples) - n_held
        for ex in examples[:cut]:
            train_x.append(ex.image)
            train_y.append(yi)
        for ex in examples[cut:]:
            held_x.append(ex.image)
            held_y.append(yi)
    if not held_x:  # degenerate split: probe on training data
        held_x, held_y = train_x, train_y

    input_shape = np.asarray(train_x[0]).shape
    model = EmbeddingModel(cfg.arch, input_shape, seed=cfg.seed)
    x_t = model.to_tensor(train_x)
    y_t = torch.as_tensor(np.asarray(train_y, dtype=np.int64))

    g = torch.Generator().manual_seed((cfg.seed * 2654435761 + 17) & 0x7FFFFFFFFFFFFFFF)
    head = torch.empty(len(classes), model.feature_dim, dtype=model.torch_dtype)
    head.uniform_(-0.1, 0.1, generator=g)
    head.requires_grad_(True)

    params = list(model.module.parameters()) + [head]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    elif cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    else:
        raise ConfigurationError(f"unknown optimizer '{cfg.optimizer}'")

    model.module.train()
    n = x_t.shape[0]
    batch = max(1, min(cfg.batch_size, n))
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            opt.zero_grad()
            feats = model.forward_t(x_t[idx])
            loss = F.cross_entropy(_cosine_logits(feats, head, cfg.head_scale), y_t[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"pre-training diverged at epoch {epoch}", last_state=model
                )
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        model.loss_trace.append(epoch_loss / n)
    model.module.eval()

    with torch.no_grad():
        feats = model.forward_t(model.to_tensor(held_x))
        pred = _cosine_logits(feats, head, cfg.head_scale).numpy().argmax(axis=1)
    model.probe_accuracy = float((pred == np.asarray(held_y)).mean())
    model.frozen = True
    for p in model.module.parameters():
        p.requires_grad_(False)

    if cfg.min_probe_acc is not None and model.probe_accuracy < cfg.min_probe_acc:
        raise TrainingError(
            f"held-out probe accuracy {model.probe_accuracy:.3f} below "
            f"required {cfg.min_probe_acc:.3f}",
            last_state=model,
        )
    return model


# -- feature export --------------------------------------------------------


def export_features(model, examples, out_path):
    """Write `source_id,label,f0..f{D-1}` rows for each example."""
    header = "source_id,label," + ",".join(f"f{i}" for i in range(model.feature_dim))
    lines = [header]
    if examples:
        feats = model.embed_batch([ex.image for ex in examples])
        for ex, f in zip(examples, feats):
            vals = ",".join(repr(float(v)) for v in f)
            lines.append(f"{ex.source_id},{ex.label},{vals}")
    try:
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ArtifactError(f"cannot write feature table {out_path}: {exc}") from exc


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    """Versioned text header + raw little-endian parameter payload."""
    flat = model.param_vector()
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"arch {model.arch}",
        f"feature_dim {model.feature_dim}",
        f"input {model.input_shape[0]} {model.input_shape[1]} {model.input_shape[2]}",
        f"dtype {model.dtype_name}",
        f"params {flat.size}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    payload = flat.astype("<" + np.dtype(_NP_DTYPES[model.dtype_name]).str[1:]).tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n---\n").encode("ascii"))
        fh.write(payload)


def _read_header(fh, magic):
    first = fh.readline().decode("ascii", errors="replace").strip()
    parts = first.split()
    if len(parts) != 2 or parts[0] != magic:
        raise ArtifactError(f"bad magic: expected '{magic}', got '{first}'")
    version = int(parts[1])
    fields = {}
    order = []
    while True:
        raw = fh.readline()
        if not raw:
            raise ArtifactError("truncated header (missing '---')")
        line = raw.decode("ascii", errors="replace").rstrip("\n")
        if line == "---":
            break
        key, _, value = line.partition(" ")
        fields[key] = value
        order.append((key, value))
    return version, fields, order


def load_checkpoint(path):
    """Load a frozen EmbeddingModel; validates magic/version/shape."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        version, fields, _ = _read_header(fh, CHECKPOINT_MAGIC)
        if version != CHECKPOINT_VERSION:
            raise ArtifactError(f"unsupported checkpoint version {version}")
        for key in ("arch", "feature_dim", "input", "dtype", "params"):
            if key not in fields:
                raise ArtifactError(f"checkpoint header missing '{key}'")
        input_shape = tuple(int(v) for v in fields["input"].split())
        dtype = fields["dtype"]
        if dtype not in _NP_DTYPES:
            raise ArtifactError(f"unsupported dtype '{dtype}'")
        model = EmbeddingModel(fields["arch"], input_shape, seed=0, dtype=dtype, frozen=True)
        if model.feature_dim != int(fields["feature_dim"]):
            raise ArtifactError("feature_dim in header does not match architecture")
        n = int(fields["params"])
        flat = np.frombuffer(fh.read(), dtype="<" + np.dtype(_NP_DTYPES[dtype]).str[1:])
        if flat.size != n:
            raise ArtifactError(f"payload has {flat.size} values, header says {n}")
        model.load_param_vector(np.asarray(flat))
    for p in model.module.parameters():
        p.requires_grad_(False)
    model.extra_fields = fields
    return model
