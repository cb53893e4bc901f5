"""Small differentiable point-cloud classifiers with hand-chained backward passes.

Two architectures:

``pointnet_mini``
    shared per-point affine+ReLU layers, max-pool over points, affine head.
``dgcnn_mini``
    one EdgeConv stage on ``[x_i, x_j - x_i]`` over the k nearest
    neighbours (max over neighbours), then the same per-point stack, pool
    and head. The neighbour graph is rebuilt every forward pass but is not
    differentiated.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ConfigError, DataError, ParseError, VersionError
from . import core
from .losses import attack_loss_J, distance, total_loss

log = logging.getLogger(__name__)

ARCHS = ("pointnet_mini", "dgcnn_mini")
CKPT_MAGIC = "saliencystrike-ckpt"
CKPT_VERSION = 1
LOSS_KINDS = ("cross_entropy", "attack", "total")


@dataclass
class VictimModel:
    arch: str
    layer_widths: list
    num_classes: int
    k_neighbors: int | None = None
    params: list = field(default_factory=list)

    def param_names(self):
        names = []
        for i in range(len(self.layer_widths)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names + ["head.weight", "head.bias"]

    def num_parameters(self):
        return int(sum(p.size for p in self.params))

    def input_width(self):
        return 6 if self.arch == "dgcnn_mini" else 3


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")


def build_model(arch="pointnet_mini", num_classes=8, layer_widths=(32, 64), k_neighbors=None, seed=0):
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHS)}")
    widths = [int(w) for w in layer_widths]
    if not widths:
        raise ConfigError("layer_widths must not be empty")
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if arch == "dgcnn_mini":
        if not k_neighbors:
            raise ConfigError("dgcnn_mini needs k_neighbors")
        k_neighbors = int(k_neighbors)
    else:
        k_neighbors = None
    model = VictimModel(arch, widths, int(num_classes), k_neighbors)
    rng = np.random.default_rng(seed)
    fans = [model.input_width()] + widths + [num_classes]
    for fan_in, fan_out in zip(fans[:-1], fans[1:]):
        s = math.sqrt(6.0 / (fan_in + fan_out))
        model.params.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        model.params.append(np.zeros(fan_out))
    return model


def _edge_features(x, neighbors):
    # x: B x N x 3, neighbors: B x N x k -> B x N x k x 6
    gathered = x[np.arange(x.shape[0])[:, None, None], neighbors]
    center = np.broadcast_to(x[:, :, None, :], gathered.shape)
    return np.concatenate([center, gathered - center], axis=-1)


def forward(model, x, neighbors=None):
    """Logits for a batch ``x`` of shape B x N x 3, plus the cache for :func:`backward`.

    ``neighbors`` pins the EdgeConv graph (B x N x k); by default it is
    recomputed from ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] == 0:
        raise DataError("cannot classify an empty cloud")
    p = model.params
    cache = {"x": x, "acts": []}
    n_layers = len(model.layer_widths)
    h = x
    start = 0
    if model.arch == "dgcnn_mini":
        k = min(model.k_neighbors, x.shape[1])
        if neighbors is None:
            neighbors = core.knn_table(x, k)
        edges = _edge_features(x, neighbors)
        z = core.affine_forward(edges, p[0], p[1])
        a = core.relu_forward(z)
        h, route = core.max_pool_points(a)
        cache.update(neighbors=neighbors, edges=edges, edge_z=z, edge_route=route, k=k)
        start = 1
    for i in range(start, n_layers):
        z = core.affine_forward(h, p[2 * i], p[2 * i + 1])
        cache["acts"].append((h, z))
        h = core.relu_forward(z)
    pooled, routing = core.max_pool_points(h)
    logits = core.affine_forward(pooled, p[-2], p[-1])
    cache.update(pooled=pooled, routing=routing, n_points=x.shape[1], start=start)
    return logits, cache


def backward(model, cache, grad_logits, need_params=True):
    """Return ``(grad_x, grad_params)`` given d(loss)/d(logits) of shape B x C."""
    p = model.params
    grads = [None] * len(p)
    g, gw, gb = core.affine_backward(grad_logits, cache["pooled"], p[-2])
    grads[-2], grads[-1] = gw, gb
    gh = core.max_pool_backward(g, cache["routing"], cache["n_points"])
    start = cache["start"]
    for j in range(len(cache["acts"]) - 1, -1, -1):
        i = start + j
        h_in, z = cache["acts"][j]
        gz = core.relu_backward(gh, z)
        gh, grads[2 * i], grads[2 * i + 1] = core.affine_backward(gz, h_in, p[2 * i])
    if model.arch != "dgcnn_mini":
        return gh, grads
    x = cache["x"]
    ga = core.max_pool_backward(gh, cache["edge_route"], cache["k"])
    gz = core.relu_backward(ga, cache["edge_z"])
    ge, grads[0], grads[1] = core.affine_backward(gz, cache["edges"], p[0])
    g_center = ge[..., :3] - ge[..., 3:]
    g_nbr = ge[..., 3:]
    gx = g_center.sum(axis=2)
    b, n = x.shape[0], x.shape[1]
    flat = (cache["neighbors"] + (np.arange(b) * n)[:, None, None]).ravel()
    g_nbr = g_nbr.reshape(-1, 3)
    scattered = np.stack(
        [np.bincount(flat, weights=g_nbr[:, c], minlength=b * n) for c in range(3)], axis=1
    )
    gx = gx + scattered.reshape(b, n, 3)
    return gx, grads


def predict_probs(model, cloud):
    points = getattr(cloud, "points", cloud)
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise DataError("cannot classify an empty cloud")
    logits, _ = forward(model, points)
    return core.softmax(logits[0])


def predict_batch(model, clouds, batch_size=64):
    """Predicted labels for a list of equal-size or variable-size clouds."""
    preds = []
    same = len({len(getattr(c, "points", c)) for c in clouds}) <= 1
    if same and clouds:
        arr = np.stack([np.asarray(getattr(c, "points", c)) for c in clouds])
        for s in range(0, len(arr), batch_size):
            logits, _ = forward(model, arr[s:s + batch_size])
            preds.extend(int(v) for v in np.argmax(logits, axis=1))
    else:
        for c in clouds:
            preds.append(int(np.argmax(predict_probs(model, c))))
    return preds


def value_and_input_grad(model, points, head, neighbors=None):
    """Evaluate ``head(probs) -> (value, grad_probs)`` and pull its gradient back to the points.

    Returns ``(value, grad_points, probs)``.
    """
    logits, cache = forward(model, points, neighbors)
    probs = core.softmax(logits[0])
    value, grad_probs = head(probs)
    grad_logits = core.softmax_backward(grad_probs, probs)
    gx, _ = backward(model, cache, grad_logits[None])
    return value, gx[0], probs


def input_gradient(model, cloud, loss_kind="cross_entropy", loss_args=None, neighbors=None):
    """Per-point gradient (N x 3) of a loss on the model output.

    ``loss_args`` keys: ``label`` always; ``preferred_class``, ``kappa2``,
    ``kappa3``, ``margin`` for ``attack`` and ``total``; additionally
    ``clean``, ``mask``, ``distance``, ``kappa1`` for ``total``.
    Returns ``(value, grad)``.
    """
    args = dict(loss_args or {})
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    label = int(args.get("label", getattr(cloud, "label", 0)))
    if loss_kind == "cross_entropy":
        logits, cache = forward(model, points, neighbors)
        _, loss, grad_logits = core.softmax_cross_entropy(logits[0], label)
        gx, _ = backward(model, cache, grad_logits[None])
        return loss, gx[0]
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}; choose from {', '.join(LOSS_KINDS)}")

    def head(probs):
        br, g = attack_loss_J(probs, label, args.get("preferred_class"), args.get("kappa2", 1.0),
                              args.get("kappa3", 0.5), args.get("margin", 0.1))
        return br.J, g

    J, gJ, _ = value_and_input_grad(model, points, head, neighbors)
    if loss_kind == "attack":
        return J, gJ
    D, gD = distance(args.get("distance", "l2"), points, args["clean"], args.get("mask"))
    kappa1 = args.get("kappa1", 1.0)
    return total_loss(J, D, kappa1), total_loss(gJ, gD, kappa1)


def train(model, dataset, config, test=None):
    """Minimize mean cross-entropy with Adam over shuffled mini-batches.

    ``dataset`` is either a :class:`~saliencystrike.data.Dataset` (its test
    split is scored each epoch) or a list of clouds. Returns the model and
    a list of ``{"epoch", "train_acc", "test_acc", "loss"}`` dicts.
    """
    train_set = getattr(dataset, "train", dataset)
    test_set = getattr(dataset, "test", test)
    if not train_set:
        raise DataError("training set is empty")
    for c in train_set:
        if not 0 <= c.label < model.num_classes:
            raise DataError(f"label {c.label} of {c.id} is out of range")
    x_all = np.stack([c.points for c in train_set])
    y_all = np.array([c.label for c in train_set])
    states = [core.AdamState.zeros_like(p) for p in model.params]
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_all))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            logits, cache = forward(model, x_all[idx])
            probs = core.softmax(logits)
            b = len(idx)
            total += -np.log(np.maximum(probs[np.arange(b), y_all[idx]], 1e-300)).sum()
            grad_logits = probs.copy()
            grad_logits[np.arange(b), y_all[idx]] -= 1.0
            _, grads = backward(model, cache, grad_logits / b)
            for i, (p, g) in enumerate(zip(model.params, grads)):
                model.params[i], _ = core.adam_step(p, g, states[i], config.lr)
        row = {"epoch": epoch, "loss": total / len(order),
               "train_acc": accuracy(model, train_set)}
        row["test_acc"] = accuracy(model, test_set) if test_set else float("nan")
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, row["loss"], row["train_acc"], row["test_acc"])
        history.append(row)
    return model, history


def accuracy(model, clouds):
    if not clouds:
        return float("nan")
    preds = predict_batch(model, clouds)
    return float(np.mean([p == c.label for p, c in zip(preds, clouds)]))


def save_checkpoint(model, path):
    lines = [f"{CKPT_MAGIC} v{CKPT_VERSION}"]
    widths = " ".join(str(w) for w in model.layer_widths)
    lines.append(f"arch {model.arch} classes {model.num_classes} k {model.k_neighbors or 0} widths {widths}")
    for name, p in zip(model.param_names(), model.params):
        lines.append(f"{name} shape {' '.join(str(d) for d in p.shape)}")
        rows = p.reshape(p.shape[0], -1) if p.ndim > 1 else p[None]
        lines.extend(" ".join(f"{v:.17g}" for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 text (byte offset {exc.start})") from None
    tokens = _Tokens(text, path)
    magic, version = tokens.line_fields(2)
    if magic != CKPT_MAGIC:
        raise ParseError(f"{path}: bad header {magic!r} at byte offset 0")
    if version != f"v{CKPT_VERSION}":
        raise VersionError(f"{path}: checkpoint version {version!r}, expected v{CKPT_VERSION}")
    fields = tokens.line_fields()
    offset = tokens.last_offset
    try:
        if fields[0] != "arch" or fields[2] != "classes" or fields[4] != "k" or fields[6] != "widths":
            raise ValueError
        arch, classes, k = fields[1], int(fields[3]), int(fields[5])
        widths = [int(w) for w in fields[7:]]
    except (ValueError, IndexError):
        raise ParseError(f"{path}: malformed arch line at byte offset {offset}") from None
    model = build_model(arch, classes, widths, k or None)
    for i, name in enumerate(model.param_names()):
        fields = tokens.line_fields()
        offset = tokens.last_offset
        expected = model.params[i].shape
        if len(fields) < 2 or fields[0] != name or fields[1] != "shape":
            raise ParseError(f"{path}: expected block {name!r} at byte offset {offset}")
        try:
            shape = tuple(int(d) for d in fields[2:])
        except ValueError:
            raise ParseError(f"{path}: bad shape for {name} at byte offset {offset}") from None
        if shape != expected:
            raise ParseError(f"{path}: {name} has shape {shape}, expected {expected} (byte offset {offset})")
        model.params[i] = tokens.floats(int(np.prod(shape))).reshape(shape)
    if tokens.remaining():
        raise ParseError(f"{path}: trailing data at byte offset {tokens.pos}")
    return model


class _Tokens:
    """Line/number reader that remembers byte offsets for error messages."""

    def __init__(self, text, path):
        self.data = text.encode("utf-8")
        self.lines = text.split("\n")
        self.path = path
        self.index = 0
        self.pos = 0
        self.last_offset = 0

    def _next_line(self):
        while self.index < len(self.lines):
            line = self.lines[self.index]
            start = self.pos
            self.pos += len(line.encode("utf-8")) + 1
            self.index += 1
            if line.strip():
                self.last_offset = start
                return line
        raise ParseError(f"{self.path}: unexpected end of file at byte offset {len(self.data)}")

    def line_fields(self, count=None):
        fields = self._next_line().split()
        if count is not None and len(fields) != count:
            raise ParseError(f"{self.path}: malformed line at byte offset {self.last_offset}")
        return fields

    def floats(self, count):
        values = []
        while len(values) < count:
            line = self._next_line()
            try:
                values.extend(float(v) for v in line.split())
            except ValueError:
                raise ParseError(f"{self.path}: bad number at byte offset {self.last_offset}") from None
        if len(values) != count:
            raise ParseError(f"{self.path}: parameter block overruns at byte offset {self.last_offset}")
        arr = np.array(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ParseError(f"{self.path}: non-finite parameter near byte offset {self.last_offset}")
        return arr

    def remaining(self):
        return any(line.strip() for line in self.lines[self.index:])
