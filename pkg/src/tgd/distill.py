"""Distillation losses, two-teacher training loop and annealed initialisation.

Loss stack
----------
* cross entropy of the student against ground truth,
* ``tau**2`` times KL(teacher || student) on temperature-softened outputs,
  one teacher or an ``alpha``-weighted pair of teachers,
* a similarity-map term: batch Gram matrices of paired stage-end features,
  row-normalised, compared with a squared Frobenius norm scaled by
  ``1 / (b**2 * n_pairs)``.  With two teachers their maps are merged as
  ``alpha * M_T1 + (1 - alpha) * M_T2`` before comparison.

The total is ``lam * CE + (1 - lam) * KD + gamma * L_m``; terms whose weight
is exactly zero are not evaluated and are logged as 0.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import BatchPlan, Dataset, PiCache, align_pis, split
from .errors import AlignmentError, BatchSizeError, ConfigError, DataError, DimensionError, PairingError, ParameterError
from .nets import ForwardRecord, Net, NetSpec, build
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("scratch", "kd_single", "sp_single", "base", "tgd")
LOG_COLUMNS = ("epoch", "lr", "L_CE", "L_KD_l", "L_m", "total", "train_acc", "val_acc")


@dataclass
class DistillConfig:
    lam: float = 0.9
    tau: float = 4.0
    gamma: float = 3000.0
    alpha: float | None = None  # None: 0.99 for tgd, 0.9 otherwise
    batch_size: int = 128
    epochs: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float | None = None  # global L2 norm bound on the loss gradient
    lr_decay_factor: float = 0.2
    lr_decay_epochs: tuple[int, ...] = (40, 80, 120, 160)
    mode: str = "tgd"
    anneal: bool | None = None  # None: on for tgd only
    eskd: bool = True
    eskd_variant: str = "best_checkpoint"  # or "stop_kd"
    kd_stop_epoch: int | None = None
    val_fraction: float = 0.1
    pi_log_scale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha is None:
            self.alpha = 0.99 if self.mode == "tgd" else 0.9
        if self.anneal is None:
            self.anneal = self.mode == "tgd"
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ParameterError(f"gamma must be nonnegative, got {self.gamma}")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be at least 2")
        if self.epochs < 0 or self.lr <= 0:
            raise ParameterError("epochs must be >= 0 and lr > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError("val_fraction must lie in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ParameterError("grad_clip must be positive or None")
        if self.eskd_variant not in ("best_checkpoint", "stop_kd"):
            raise ConfigError(f"unknown eskd_variant {self.eskd_variant!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: decayed once per milestone already passed."""
        drops = sum(1 for m in self.lr_decay_epochs if epoch > m)
        return self.lr * self.lr_decay_factor**drops

    def _teacher_terms_active(self) -> bool:
        if self.mode == "scratch":
            return False
        return self.lam < 1 or (self.mode in ("sp_single", "tgd") and self.gamma > 0)

    def needs_teacher1(self) -> bool:
        return self._teacher_terms_active() and (self.mode in ("kd_single", "sp_single") or self.alpha > 0)

    def needs_teacher2(self) -> bool:
        return self._teacher_terms_active() and self.mode in ("base", "tgd") and self.alpha < 1

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Similarity maps


@dataclass
class SimilarityMap:
    matrix: Tensor  # (b, b)
    source: str = "student"
    layer_index: int = 0

    @property
    def b(self) -> int:
        return self.matrix.shape[0]

    def numpy(self) -> np.ndarray:
        return self.matrix.data


def similarity_map(features: Tensor, source: str = "student", layer_index: int = 0) -> SimilarityMap:
    """Batch Gram matrix ``F F^T`` of features flattened to ``(b, c*h*w)``."""
    features = T.as_tensor(features)
    b = features.shape[0]
    if b < 2:
        raise BatchSizeError("a similarity map needs a batch of at least 2")
    flat = T.reshape(features, (b, -1))
    return SimilarityMap(T.matmul(flat, T.transpose(flat)), source, layer_index)


def normalize_map(m: SimilarityMap) -> SimilarityMap:
    return SimilarityMap(T.row_normalize(m.matrix), m.source, m.layer_index)


def merge_maps(m1: SimilarityMap, m2: SimilarityMap, alpha: float) -> SimilarityMap:
    if m1.matrix.shape != m2.matrix.shape:
        raise DimensionError(f"cannot merge similarity maps of shapes {m1.matrix.shape} and {m2.matrix.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    merged = T.add(T.scale(m1.matrix, alpha), T.scale(m2.matrix, 1.0 - alpha))
    return SimilarityMap(merged, "merged", m1.layer_index)


# ---------------------------------------------------------------------------
# Losses


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return T.scale(T.tsum(T.mul(T.log_softmax(logits), onehot)), -1.0 / n)


def loss_kl_soft(logits_t, logits_s: Tensor, tau: float) -> Tensor:
    """``tau**2 * KL(softmax(l_t/tau) || softmax(l_s/tau))``, batch mean.

    The teacher side is treated as a constant.
    """
    lt = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t)
    if lt.shape != logits_s.shape:
        raise DimensionError(f"teacher logits {lt.shape} and student logits {logits_s.shape} differ in shape")
    lt = lt.astype(logits_s.dtype)
    with T.no_grad():
        log_zt = T.log_softmax(Tensor(lt), tau).data
    zt = np.exp(log_zt)
    log_zs = T.log_softmax(logits_s, tau)
    # sum z_t log z_t is constant; it keeps the value an actual KL divergence
    per_batch = T.sub(np.asarray((zt * log_zt).sum(), dtype=lt.dtype), T.tsum(T.mul(log_zs, zt)))
    return T.scale(per_batch, tau * tau / lt.shape[0])


def loss_logit_two_teacher(logits_t1, logits_t2, logits_s: Tensor, tau: float, alpha: float) -> Tensor:
    """``alpha * KD(t1) + (1 - alpha) * KD(t2)`` with ``KD`` from :func:`loss_kl_soft`."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return loss_kl_soft(logits_t1, logits_s, tau)
    if alpha == 0.0:
        return loss_kl_soft(logits_t2, logits_s, tau)
    return T.add(T.scale(loss_kl_soft(logits_t1, logits_s, tau), alpha), T.scale(loss_kl_soft(logits_t2, logits_s, tau), 1.0 - alpha))


def loss_similarity(teacher_maps: list[SimilarityMap], student_maps: list[SimilarityMap]) -> Tensor:
    """Mean squared difference of row-normalised maps over all layer pairs."""
    if len(teacher_maps) != len(student_maps) or not teacher_maps:
        raise PairingError(f"need equally many teacher and student maps, got {len(teacher_maps)} and {len(student_maps)}")
    total = None
    for mt, ms in zip(teacher_maps, student_maps):
        if mt.matrix.shape != ms.matrix.shape:
            raise DimensionError(f"paired maps differ in shape: {mt.matrix.shape} vs {ms.matrix.shape}")
        diff = T.sub(normalize_map(mt).matrix, normalize_map(ms).matrix)
        term = T.tsum(T.square(diff))
        total = term if total is None else T.add(total, term)
    b = student_maps[0].b
    return T.scale(total, 1.0 / (b * b * len(student_maps)))


def loss_total_tgd(l_ce: Tensor | None, l_kd: Tensor | None, l_m: Tensor | None, lam: float, gamma: float) -> Tensor:
    """``lam * CE + (1 - lam) * KD + gamma * L_m``; ``None`` parts are left out."""
    terms = []
    if l_ce is not None:
        terms.append(T.scale(l_ce, lam))
    if l_kd is not None:
        terms.append(T.scale(l_kd, 1.0 - lam))
    if l_m is not None:
        terms.append(T.scale(l_m, gamma))
    if not terms:
        raise ConfigError("loss has no active terms")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


@dataclass
class LossParts:
    total: Tensor
    ce: float = 0.0
    kd: float = 0.0
    sim: float = 0.0


def _teacher_maps(rec: ForwardRecord | None, source: str) -> list[SimilarityMap]:
    with T.no_grad():
        return [similarity_map(f.detach(), source, i) for i, f in enumerate(rec.block_features)]


def compose_loss(
    mode: str,
    labels,
    student: ForwardRecord,
    teacher1: ForwardRecord | None = None,
    teacher2: ForwardRecord | None = None,
    *,
    lam: float = 0.9,
    tau: float = 4.0,
    gamma: float = 3000.0,
    alpha: float = 0.99,
    use_kd: bool = True,
) -> LossParts:
    """Build the objective of ``mode`` from already computed forward passes.

    ``scratch`` is plain cross entropy.  ``kd_single`` and ``sp_single`` use
    teacher 1 only (the latter adds its unmerged maps).  ``base`` distils the
    logits of both teachers; ``tgd`` adds merged similarity maps.
    ``use_kd=False`` drops every teacher term (late stage of early-stopped KD).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "scratch" or not use_kd:
        ce = loss_ce(student.logits, labels)
        return LossParts(ce, ce=ce.item())

    w_kd = 1.0 - lam
    use_sim = mode in ("sp_single", "tgd") and gamma != 0
    active = w_kd != 0 or use_sim
    use_t1 = active and (mode in ("kd_single", "sp_single") or alpha > 0)
    use_t2 = active and mode in ("base", "tgd") and alpha < 1
    if use_t1 and teacher1 is None:
        raise ConfigError(f"mode {mode} needs teacher 1 outputs")
    if use_t2 and teacher2 is None:
        raise ConfigError(f"mode {mode} needs teacher 2 outputs")

    l_ce = loss_ce(student.logits, labels) if lam != 0 else None
    l_kd = None
    if w_kd != 0:
        if mode in ("kd_single", "sp_single"):
            l_kd = loss_kl_soft(teacher1.logits, student.logits, tau)
        else:
            l_kd = loss_logit_two_teacher(
                teacher1.logits if teacher1 is not None else None,
                teacher2.logits if teacher2 is not None else None,
                student.logits,
                tau,
                alpha,
            )
    l_m = None
    if use_sim:
        s_maps = [similarity_map(f, "student", i) for i, f in enumerate(student.block_features)]
        if mode == "sp_single":
            t_maps = _teacher_maps(teacher1, "teacher1")
        elif not use_t2:
            t_maps = _teacher_maps(teacher1, "teacher1")
        elif not use_t1:
            t_maps = _teacher_maps(teacher2, "teacher2")
        else:
            with T.no_grad():
                t_maps = [merge_maps(a, b, alpha) for a, b in zip(_teacher_maps(teacher1, "teacher1"), _teacher_maps(teacher2, "teacher2"))]
        l_m = loss_similarity(t_maps, s_maps)
    total = loss_total_tgd(l_ce, l_kd, l_m, lam, gamma)
    return LossParts(
        total,
        ce=l_ce.item() if l_ce is not None else 0.0,
        kd=l_kd.item() if l_kd is not None else 0.0,
        sim=l_m.item() if l_m is not None else 0.0,
    )


# ---------------------------------------------------------------------------
# Training


@dataclass
class Teachers:
    teacher1: Net | None = None  # raw images
    teacher2: Net | None = None  # persistence images


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    kd: float
    sim: float
    total: float
    train_acc: float
    val_acc: float

    def csv(self) -> str:
        return ",".join([str(self.epoch), repr(self.lr)] + [repr(float(v)) for v in (self.ce, self.kd, self.sim, self.total, self.train_acc, self.val_acc)])


@dataclass
class TrainResult:
    net: Net
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    train_set: Dataset | None = None
    val_set: Dataset | None = None

    def log_text(self) -> str:
        return "".join(r.csv() + "\n" for r in self.log)


def pi_inputs(grids: np.ndarray, log_scale: bool = True) -> np.ndarray:
    """Network input transform for persistence images (NHWC float32)."""
    grids = np.asarray(grids, dtype=np.float32)
    return np.log1p(grids) if log_scale else grids


def anneal_init(student: Net, checkpoint) -> Net:
    """Overwrite ``student`` parameters with a scratch-trained checkpoint.

    ``checkpoint`` is a file path or a name -> array mapping; any name or
    shape mismatch raises :class:`~tgd.errors.CheckpointError`.
    """
    state = T.load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    student.load_state(state)
    return student


def accuracy_of(net: Net, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        raise DataError("cannot measure accuracy on an empty set")
    from .nets import predict_logits

    pred = predict_logits(net, inputs, batch_size).argmax(axis=1)
    return float((pred == labels).mean() * 100.0)


@dataclass
class FrozenOutputs:
    """Logits and stage features of a frozen network over a whole input array."""

    logits: np.ndarray
    features: list[np.ndarray]

    def record(self, positions) -> ForwardRecord:
        return ForwardRecord(Tensor(self.logits[positions]), [Tensor(f[positions]) for f in self.features])


def frozen_outputs(net: Net | None, inputs: np.ndarray | None, keep_features: bool = True, chunk: int = 256) -> FrozenOutputs | None:
    """Evaluate a frozen teacher once, in fixed chunks, so batches can index it."""
    if net is None or inputs is None:
        return None
    logits, feats = [], []
    with T.no_grad():
        for start in range(0, len(inputs), chunk):
            rec = net.forward(Tensor(inputs[start : start + chunk]))
            logits.append(rec.logits.data)
            if keep_features:
                feats.append([f.data for f in rec.block_features])
    features = [np.concatenate(level) for level in zip(*feats)] if keep_features else []
    return FrozenOutputs(np.concatenate(logits), features)


def _record(out: FrozenOutputs | None, positions) -> ForwardRecord | None:
    return None if out is None else out.record(positions)


def clip_gradients(net: Net, max_norm: float | None) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in net.params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for p in net.params.values():
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype, copy=False)
    return norm


def _sgd_step(net: Net, velocity: dict, lr: float, momentum: float, weight_decay: float):
    """Momentum SGD with coupled weight decay: ``v = m v + g + wd p``, ``p -= lr v``."""
    for name, p in net.params.items():
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        velocity[name] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)
        p.grad = None


def train(
    config: DistillConfig,
    dataset: Dataset,
    teachers: Teachers | None = None,
    pi_cache: PiCache | None = None,
    *,
    student_spec: NetSpec | None = None,
    init_state=None,
    modality: str = "raw",
    log_path=None,
) -> TrainResult:
    """Train a network under ``config.mode``.

    ``modality="pi"`` trains a scratch network on persistence images (the
    second teacher); everything else trains a raw-image student.  A seeded
    ``config.val_fraction`` of ``dataset`` is held out for validation and,
    with ``config.eskd``, the best-validation parameters are returned.
    ``init_state`` (required when ``config.anneal``) seeds the student with a
    scratch checkpoint.
    """
    teachers = teachers or Teachers()
    if modality not in ("raw", "pi"):
        raise ConfigError(f"modality must be 'raw' or 'pi', got {modality!r}")
    if modality == "pi" and config.mode != "scratch":
        raise ConfigError("persistence-image networks are trained from scratch only")
    need_t1 = config.needs_teacher1()
    need_t2 = config.needs_teacher2()
    if need_t1 and teachers.teacher1 is None:
        raise ConfigError(f"mode {config.mode} needs a raw-image teacher")
    if need_t2 and teachers.teacher2 is None:
        raise ConfigError(f"mode {config.mode} needs a persistence-image teacher")

    pis_all = None
    if need_t2 or modality == "pi":
        if pi_cache is None:
            raise AlignmentError("persistence images are required but no cache was given")
        pis_all = pi_inputs(align_pis(dataset, pi_cache), config.pi_log_scale)

    train_pos, val_pos = _split_positions(len(dataset), config.val_fraction, config.seed)
    train_set, val_set = dataset.subset(train_pos), dataset.subset(val_pos)
    if len(train_set) < config.batch_size:
        raise DataError(f"training set of {len(train_set)} samples is smaller than one batch of {config.batch_size}")

    def inputs_of(positions, which):
        if which == "pi":
            return pis_all[positions]
        return dataset.inputs(positions)

    student_input = "pi" if modality == "pi" else "raw"
    x_train = inputs_of(train_pos, student_input)
    x_val = inputs_of(val_pos, student_input) if len(val_pos) else None

    if student_spec is None:
        h, w, c = x_train.shape[1:]
        student_spec = NetSpec(input_shape=(h, w, c), num_classes=dataset.num_classes)
    net = build(student_spec, seed=config.seed)
    if config.anneal:
        if init_state is None:
            raise ConfigError("annealing is on but no scratch checkpoint was given")
        anneal_init(net, init_state)

    t1 = teachers.teacher1.freeze() if (need_t1 and teachers.teacher1) else None
    t2 = teachers.teacher2.freeze() if (need_t2 and teachers.teacher2) else None
    keep = config.mode in ("sp_single", "tgd") and config.gamma != 0
    out1 = frozen_outputs(t1, dataset.inputs(train_pos) if t1 is not None else None, keep)
    out2 = frozen_outputs(t2, pis_all[train_pos] if t2 is not None else None, keep)
    y_train = dataset.labels[train_pos]
    y_val = dataset.labels[val_pos]

    loss_kwargs = dict(lam=config.lam, tau=config.tau, gamma=config.gamma, alpha=config.alpha)
    plan = BatchPlan(seed=config.seed, batch_size=config.batch_size, drop_last=True)

    def val_accuracy(model):
        return accuracy_of(model, x_val, y_val) if x_val is not None else float("nan")

    def evaluate_losses(model):
        # epoch-0 row: losses of the initial parameters over full training batches
        sums = np.zeros(4)
        count = 0
        for pos in plan.batches(0, len(train_pos)):
            with T.no_grad():
                parts = compose_loss(
                    config.mode,
                    y_train[pos],
                    model.forward(Tensor(x_train[pos])),
                    _record(out1, pos),
                    _record(out2, pos),
                    **loss_kwargs,
                )
            sums += (parts.ce, parts.kd, parts.sim, parts.total.item())
            count += 1
        return sums / max(count, 1)

    records = []
    init_losses = evaluate_losses(net)
    train_acc0 = accuracy_of(net, x_train, y_train)
    records.append(EpochRecord(0, 0.0, *init_losses, train_acc0, val_accuracy(net)))

    best_state, best_acc, best_epoch = net.state(), records[0].val_acc, 0
    velocity: dict = {}
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        use_kd = not (config.eskd and config.eskd_variant == "stop_kd" and config.kd_stop_epoch is not None and epoch > config.kd_stop_epoch)
        sums = np.zeros(4)
        correct = seen = 0
        batches = plan.batches(epoch, len(train_pos))
        for pos in batches:
            rec_s = net.forward(Tensor(x_train[pos]))
            rec_t1 = _record(out1, pos) if use_kd else None
            rec_t2 = _record(out2, pos) if use_kd else None
            parts = compose_loss(config.mode, y_train[pos], rec_s, rec_t1, rec_t2, use_kd=use_kd, **loss_kwargs)
            if not np.isfinite(parts.total.data).all():
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            net.zero_grad()
            T.backward(parts.total)
            if config.grad_clip is not None:
                clip_gradients(net, config.grad_clip)
            _sgd_step(net, velocity, lr, config.momentum, config.weight_decay)
            sums += (parts.ce, parts.kd, parts.sim, parts.total.item())
            correct += int((rec_s.logits.data.argmax(axis=1) == y_train[pos]).sum())
            seen += len(pos)
        means = sums / max(len(batches), 1)
        rec = EpochRecord(epoch, lr, *means, 100.0 * correct / max(seen, 1), val_accuracy(net))
        records.append(rec)
        log.info("epoch %d %s", epoch, rec.csv())
        if config.eskd and rec.val_acc > best_acc:
            best_state, best_acc, best_epoch = net.state(), rec.val_acc, epoch

    if config.eskd and config.eskd_variant == "best_checkpoint" and len(val_pos):
        net.load_state(best_state)
    else:
        best_epoch = config.epochs
    result = TrainResult(net, records, best_epoch, train_set, val_set)
    if log_path is not None:
        T.atomic_write(log_path, result.log_text())
    return result


def _split_positions(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def with_overrides(config: DistillConfig, **kwargs) -> DistillConfig:
    return replace(config, **kwargs)
