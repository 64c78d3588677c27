"""Desk-scale comparison of scratch, single-teacher KD and two-teacher TGD students.

Synthetic bars with heavy pixel noise and flipped training labels; a raw
teacher and a persistence-image teacher of 4x the student's parameter count
are trained once, then each seed trains a scratch student, a KD student and
a TGD student annealed from that seed's scratch student.

    python3 -m tgd.experiments [--seeds 3] [--epochs 20]
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import align_pis, build_pi_cache, flip_labels, gen_synthetic
from .distill import DistillConfig, Teachers, accuracy_of, pi_inputs, train
from .nets import NetSpec
from .tda import PiParams


@dataclass
class DirectionSetup:
    n_train: int = 5000
    n_test: int = 2000
    num_classes: int = 4
    pixel_noise: float = 0.8
    label_flip: float = 0.1
    data_seed: int = 11
    epochs: int = 20
    lr: float = 0.05
    grad_clip: float = 2.0
    student_width: int = 4
    teacher_width: int = 8
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class DirectionResult:
    setup: DirectionSetup
    teacher1_acc: float = 0.0
    teacher2_acc: float = 0.0
    per_seed: dict[str, list[float]] = field(default_factory=lambda: {"scratch": [], "kd_single": [], "tgd": []})
    seconds: float = 0.0

    def mean(self, mode: str) -> float:
        return float(np.mean(self.per_seed[mode]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["means"] = {m: self.mean(m) for m in self.per_seed}
        return d


def direction_experiment(setup: DirectionSetup | None = None, progress=None) -> DirectionResult:
    setup = setup or DirectionSetup()
    t0 = time.perf_counter()
    say = progress or (lambda msg: None)
    pool = gen_synthetic("bars", setup.n_train + setup.n_test, seed=setup.data_seed, num_classes=setup.num_classes, noise=setup.pixel_noise)
    train_set = flip_labels(pool.subset(np.arange(setup.n_train)), setup.label_flip, seed=setup.data_seed)
    test_set = pool.subset(np.arange(setup.n_train, setup.n_train + setup.n_test))
    params = PiParams()
    cache = build_pi_cache(train_set, params)
    test_pis = pi_inputs(align_pis(test_set, build_pi_cache(test_set, params)))
    say(f"persistence images ready ({time.perf_counter() - t0:.0f}s)")

    k = setup.num_classes
    student = NetSpec(num_classes=k, stem_stride=2, base_width=setup.student_width)
    raw_teacher = NetSpec(num_classes=k, stem_stride=2, base_width=setup.teacher_width)
    pi_teacher = NetSpec(input_shape=(params.grid_size, params.grid_size, params.channels), num_classes=k, stem_stride=2, base_width=setup.teacher_width, convs_per_block=1)
    common = dict(epochs=setup.epochs, lr=setup.lr, grad_clip=setup.grad_clip, lr_decay_epochs=(setup.epochs // 2, 3 * setup.epochs // 4))

    result = DirectionResult(setup)
    t1 = train(DistillConfig(mode="scratch", seed=100, **common), train_set, student_spec=raw_teacher).net
    t2 = train(DistillConfig(mode="scratch", seed=200, **common), train_set, pi_cache=cache, student_spec=pi_teacher, modality="pi").net
    result.teacher1_acc = accuracy_of(t1, test_set.inputs(), test_set.labels)
    result.teacher2_acc = accuracy_of(t2, test_pis, test_set.labels)
    say(f"teachers: raw {result.teacher1_acc:.2f}%, persistence {result.teacher2_acc:.2f}% ({time.perf_counter() - t0:.0f}s)")

    x_test, y_test = test_set.inputs(), test_set.labels
    for seed in setup.seeds:
        scratch = train(DistillConfig(mode="scratch", seed=seed, **common), train_set, student_spec=student)
        kd = train(DistillConfig(mode="kd_single", seed=seed, **common), train_set, Teachers(t1), student_spec=student)
        tgd = train(DistillConfig(mode="tgd", seed=seed, **common), train_set, Teachers(t1, t2), cache, student_spec=student, init_state=scratch.net.state())
        for mode, res in (("scratch", scratch), ("kd_single", kd), ("tgd", tgd)):
            result.per_seed[mode].append(accuracy_of(res.net, x_test, y_test))
        say(f"seed {seed}: " + ", ".join(f"{m} {v[-1]:.2f}%" for m, v in result.per_seed.items()) + f" ({time.perf_counter() - t0:.0f}s)")
    result.seconds = time.perf_counter() - t0
    return result


def main():
    parser = argparse.ArgumentParser(description="scratch vs KD vs TGD on noisy synthetic bars")
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--json", help="write the result here")
    args = parser.parse_args()
    res = direction_experiment(DirectionSetup(epochs=args.epochs, seeds=tuple(range(args.seeds))), progress=print)
    for mode in res.per_seed:
        print(f"{mode:<10} mean test accuracy {res.mean(mode):.2f}%")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res.to_dict(), fh, indent=2)


if __name__ == "__main__":
    main()
