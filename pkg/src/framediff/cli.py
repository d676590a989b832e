"""Command-line entry point: train, generate, probe, bench, verify.

One master seed feeds every named randomness stream, so any command run
twice with the same config produces bit-identical outputs. Training
configs are plain KEY=VALUE files with command-line overrides.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from .data import (
    BounceParams,
    LatentVideo,
    gen_dataset,
    read_dataset,
    write_dataset,
)
from .errors import DivergenceError, DomainError, FormatError, FramediffError
from .frame_attention import (
    FlopCounter,
    FrameLayout,
    MaskVariant,
    build_mask,
    frame_pair_count,
)
from .model import FrameDiT, ModelConfig
from .probe import probe_sweep
from .sampler import SamplerConfig, rollout, write_pgm
from .schedule import (
    DiffusionPair,
    Parameterization,
    companion_of,
    forward_diffuse,
    recover,
)
from .tensor import Tensor, grad_check
from .trainer import TrainConfig, batch_loss, fit, fit_paired

# -- config files -----------------------------------------------------------------

CONFIG_SCHEMA: dict[str, tuple] = {
    # model geometry
    "layers": (int, 4), "hidden": (int, 128), "mlp": (int, 512), "heads": (int, 4),
    "patch": (int, 4), "channels": (int, 1), "height": (int, 16), "width": (int, 16),
    # dataset
    "frames": (int, 8), "videos": (int, 2048), "data": (str, ""), "data_seed": (int, 0),
    "radius": (float, 3.0), "speed_min": (float, 0.5), "speed_max": (float, 2.0),
    "label_rule": (str, "quadrant"),
    # optimization
    "lr": (float, 1e-4), "batch": (int, 16), "steps": (int, 2000),
    "p_drop": (float, 0.1), "precision": (int, 32), "seed": (int, 0),
    "variant": (str, "of"), "param": (str, "companion"),
    "checkpoint_every": (int, 500), "t_min": (float, 0.001),
}


def load_config(path: str, overrides: dict | None = None) -> dict:
    """KEY=VALUE file (# comments) merged over schema defaults."""
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected KEY=VALUE, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise FormatError(f"{path}:{lineno}: unknown config key {key!r}")
            caster = CONFIG_SCHEMA[key][0]
            values[key] = caster(value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in CONFIG_SCHEMA:
            raise FormatError(f"unknown config key {key!r}")
        values[key] = CONFIG_SCHEMA[key][0](value)
    return values


def model_config_from(values: dict) -> ModelConfig:
    return ModelConfig(
        layers=values["layers"], hidden=values["hidden"], mlp=values["mlp"],
        heads=values["heads"], patch=values["patch"], channels=values["channels"],
        height=values["height"], width=values["width"],
        variant=MaskVariant(values["variant"]),
        param=Parameterization(values["param"]),
    )


def train_config_from(values: dict) -> TrainConfig:
    return TrainConfig(
        steps=values["steps"], lr=values["lr"], batch=values["batch"],
        p_drop=values["p_drop"], precision=values["precision"], seed=values["seed"],
        variant=MaskVariant(values["variant"]),
        param=Parameterization(values["param"]),
        checkpoint_every=values["checkpoint_every"], t_min=values["t_min"],
    )


def load_or_generate_videos(values: dict) -> list[LatentVideo]:
    if values["data"]:
        return read_dataset(values["data"])
    params = BounceParams(
        radius=values["radius"], speed_min=values["speed_min"],
        speed_max=values["speed_max"], height=values["height"], width=values["width"],
        frames=values["frames"], channels=values["channels"],
        label_rule=values["label_rule"],
    )
    return gen_dataset(params, values["data_seed"], values["videos"])


# -- train ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed, "variant": args.variant, "param": args.param,
        "steps": args.steps, "precision": args.precision,
    }
    values = load_config(args.config, overrides)
    videos = load_or_generate_videos(values)
    frames = np.stack([v.frames for v in videos])
    model_config = model_config_from(values)
    config = train_config_from(values)
    os.makedirs(args.out, exist_ok=True)

    try:
        if args.paired:
            dirs, logs = {}, {}
            for variant in (MaskVariant.OF, MaskVariant.OF2):
                dirs[variant] = os.path.join(args.out, variant.value)
                os.makedirs(dirs[variant], exist_ok=True)
                logs[variant] = os.path.join(dirs[variant], "metrics.jsonl")
            runs = fit_paired(frames, model_config, config, dirs, logs)
        else:
            log_path = os.path.join(args.out, "metrics.jsonl")
            runs = {config.variant: fit(frames, model_config, config,
                                        out_dir=args.out, log_path=log_path)}
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    for variant, (state, metrics) in runs.items():
        last = metrics[-1]["loss"] if metrics else float("nan")
        print(f"trained variant={variant.value} steps={config.steps} final_loss={last:.6f}")
    return 0


# -- generate --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    model = FrameDiT.load(args.checkpoint, dtype=np.float64 if args.precision == 64 else np.float32)
    videos = read_dataset(args.context)
    os.makedirs(args.out, exist_ok=True)
    config = SamplerConfig(
        steps=args.steps, guidance_scale=args.guidance,
        frames_to_generate=args.frames, seed=args.seed,
    )
    outputs: list[LatentVideo] = []
    k = args.context_frames
    mse_rows = []
    for vi, video in enumerate(videos):
        if video.frames.shape[0] < k:
            raise DomainError(
                f"video {vi} has {video.frames.shape[0]} frames, need {k} for context"
            )
        context = [video.frames[i].astype(np.float64) for i in range(k)]
        generated = rollout(model, context, config)
        stack = (
            np.stack(generated).astype(np.float32)
            if generated
            else np.zeros((0, *video.frames.shape[1:]), dtype=np.float32)
        )
        outputs.append(LatentVideo(stack, video.label))
        truth = video.frames[k:]
        for gi, frame in enumerate(generated):
            if gi < len(truth):
                mse = float(np.mean((frame - truth[gi]) ** 2))
                baseline = float(np.mean((video.frames[k - 1] - truth[gi]) ** 2))
                mse_rows.append((vi, gi, mse, baseline))
        if args.dump_pgm:
            for gi, frame in enumerate(generated):
                write_pgm(frame, os.path.join(args.out, f"video{vi:03d}_frame{gi:02d}.pgm"))
    write_dataset(outputs, os.path.join(args.out, "generated.gpdv"))
    for vi, gi, mse, baseline in mse_rows:
        print(f"video {vi} frame +{gi + 1}: mse={mse:.6f} copy_last={baseline:.6f}")
    if mse_rows:
        first = [r for r in mse_rows if r[1] == 0]
        mean_mse = float(np.mean([r[2] for r in first]))
        mean_base = float(np.mean([r[3] for r in first]))
        print(f"first-frame mean mse={mean_mse:.6f} copy_last={mean_base:.6f}")
    print(f"wrote {len(outputs)} videos to {os.path.join(args.out, 'generated.gpdv')}")
    return 0


# -- probe -----------------------------------------------------------------------------


def cmd_probe(args) -> int:
    model = FrameDiT.load(args.checkpoint)
    videos = read_dataset(args.data)
    if args.layers == "all":
        layers = list(range(1, model.config.layers + 1))
    else:
        layers = [int(x) for x in args.layers.split(",")]
    report = probe_sweep(model, videos, layers, seed=args.seed)
    report.write_csv(args.out)
    for entry in report.entries:
        print(f"layer {entry.layer}: accuracy={entry.accuracy:.4f}")
    best = report.best()
    print(f"best layer {best.layer}: accuracy={best.accuracy:.4f} -> {args.out}")
    return 0


# -- bench -----------------------------------------------------------------------------


def cmd_bench(args) -> int:
    frames_list = [int(x) for x in args.frames.split(",")]
    if min(frames_list) < 1:
        raise DomainError("frame counts must be >= 1")
    variants = {
        "of": [MaskVariant.OF], "of2": [MaskVariant.OF2],
        "both": [MaskVariant.OF, MaskVariant.OF2],
    }[args.variant]
    cfg = ModelConfig(
        layers=args.layers_n, hidden=args.hidden, mlp=4 * args.hidden, heads=args.heads,
        patch=4, channels=1, height=16, width=16,
    )
    rng = np.random.default_rng(args.seed)
    rows = []
    for F in frames_list:
        shape = (1, F, cfg.channels, cfg.height, cfg.width)
        clean = rng.standard_normal(shape)
        eps = rng.standard_normal(shape)
        t = np.array([0.5])
        for variant in variants:
            model = FrameDiT(dataclasses.replace(cfg, variant=variant), seed=args.seed)
            noisy = np.cos(np.pi / 4) * clean + np.sin(np.pi / 4) * eps
            counter = FlopCounter()
            started = time.perf_counter()
            model.forward_train(clean, noisy, t, counter=counter)
            wall_ms = (time.perf_counter() - started) * 1e3
            counts = frame_pair_count(variant, F)
            closed_macs = (
                2 * counts.total * cfg.heads * cfg.tokens_per_frame**2
                * cfg.head_dim * cfg.layers
            )
            instrumented_pairs = build_mask(
                FrameLayout.training(F, cfg.tokens_per_frame), variant
            ).pair_count()
            if counter.attention_macs != closed_macs or instrumented_pairs != counts.total:
                print(
                    f"error: instrumented count mismatch at F={F} {variant.value}: "
                    f"{counter.attention_macs} vs {closed_macs}",
                    file=sys.stderr,
                )
                return 2
            cache_bytes = 2 * cfg.layers * cfg.heads * F * cfg.tokens_per_frame * cfg.head_dim * 4
            rows.append({
                "variant": variant.value, "frames": F,
                "clean_clean": counts.clean_clean, "noisy_clean": counts.noisy_clean,
                "noisy_self": counts.noisy_self, "pairs": counts.total,
                "attention_macs": counter.attention_macs,
                "cache_bytes": cache_bytes, "wall_ms": round(wall_ms, 3),
            })
    with open(args.out, "w") as fh:
        fh.write(",".join(rows[0].keys()) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row.values()) + "\n")
    for F in frames_list:
        of_row = next((r for r in rows if r["frames"] == F and r["variant"] == "of"), None)
        of2_row = next((r for r in rows if r["frames"] == F and r["variant"] == "of2"), None)
        if of_row and of2_row:
            ratio = of2_row["pairs"] / of_row["pairs"]
            print(f"F={F}: pairs of={of_row['pairs']} of2={of2_row['pairs']} ratio={ratio:.4f}")
    print(f"bench report -> {args.out}")
    return 0


# -- verify ----------------------------------------------------------------------------


def _check_rotation_round_trip() -> tuple[bool, str]:
    rng = np.random.default_rng(1000)
    worst = 0.0
    for _ in range(1000):
        pair = DiffusionPair(rng.standard_normal(8), rng.standard_normal(8))
        t = float(rng.uniform(0, 1))
        back = recover(forward_diffuse(pair, t), companion_of(pair, t), t)
        worst = max(worst, float(np.max(np.abs(back.x0 - pair.x0))),
                    float(np.max(np.abs(back.eps - pair.eps))))
    return worst <= 1e-12, f"max error {worst:.2e}"


def _check_mask_oracle() -> tuple[bool, str]:
    from .frame_attention import CLEAN, NOISY

    checked = 0
    for variant in (MaskVariant.OF, MaskVariant.OF2):
        for F in range(1, 7):
            for P in (1, 4):
                layout = FrameLayout.training(F, P)
                mask = build_mask(layout, variant).admissible
                for q in range(layout.length):
                    qf, qk, _ = layout.token_info(q)
                    for kk_ in range(layout.length):
                        kf, kkind, _ = layout.token_info(kk_)
                        if qk == NOISY:
                            want = (kkind == CLEAN and kf < qf) or (kkind == NOISY and kf == qf)
                        else:
                            want = kkind == CLEAN and (kf <= qf if variant == MaskVariant.OF else kf == qf)
                        if mask[q, kk_] != want:
                            return False, f"mismatch at F={F} P={P} {variant.value} ({q},{kk_})"
                        checked += 1
    return True, f"{checked} pairs enumerated"


def _verify_model(variant: MaskVariant, corrupt_mask: bool = False) -> FrameDiT:
    cfg = ModelConfig(layers=4, hidden=64, mlp=128, heads=4, patch=4,
                      channels=1, height=8, width=8, variant=variant)
    model = FrameDiT(cfg, seed=77, dtype=np.float64)
    rng = np.random.default_rng(77)
    model.params["head.w"] = Tensor(
        rng.normal(0, 0.05, model.params["head.w"].shape), requires_grad=True
    )
    if corrupt_mask:
        _install_corrupt_mask(model)
    return model


def _install_corrupt_mask(model: FrameDiT) -> None:
    """Test hook: flip one mask bit (n_1 may see c_2) to break causality."""
    original = model._forward_sequence

    def corrupted(tokens, thetas, mask, *rest, **kw):
        admissible = mask.admissible.copy()
        P = mask.tokens_per_frame
        if admissible.shape[0] >= 4 * P:  # training layout with >= 2 frames
            admissible[P : 2 * P, 2 * P : 3 * P] = True
        mask = dataclasses.replace(mask, admissible=admissible)
        return original(tokens, thetas, mask, *rest, **kw)

    model._forward_sequence = corrupted


def _check_causality(variant: MaskVariant, corrupt_mask: bool, trials: int = 25) -> tuple[bool, str]:
    model = _verify_model(variant, corrupt_mask)
    rng = np.random.default_rng(88)
    F, P = 4, model.config.tokens_per_frame
    shape = (1, F, 1, 8, 8)
    clean = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    t = np.array([0.6])
    noisy = np.cos(0.3) * clean + np.sin(0.3) * eps
    base = model.forward_train(clean, noisy, t).data
    # trial 0 always perturbs the clean copy of frame 2, so a corrupted
    # n_1 -> c_2 mask bit is caught deterministically
    for trial in range(trials):
        j = 2 if trial == 0 else int(rng.integers(2, F + 1))
        perturb_clean = True if trial == 0 else rng.random() < 0.5
        clean_p, noisy_p = clean.copy(), noisy.copy()
        target = clean_p if perturb_clean else noisy_p
        target[0, j - 1] += rng.standard_normal((1, 8, 8))
        out = model.forward_train(clean_p, noisy_p, t).data
        if not np.array_equal(base[0, : (j - 1) * P], out[0, : (j - 1) * P]):
            return False, f"prediction moved for frames before {j}"
    return True, f"{trials} perturbations, bit-exact"

def _check_cache_equivalence(variant: MaskVariant) -> tuple[bool, str]:
    model = _verify_model(variant)
    rng = np.random.default_rng(99)
    context = [rng.standard_normal((1, 8, 8)) for _ in range(2)]
    config = SamplerConfig(steps=3, seed=5, frames_to_generate=2, guidance_scale=1.5)
    cached = rollout(model, context, config, use_cache=True)
    recomputed = rollout(model, context, config, use_cache=False)
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(cached, recomputed))
    return worst <= 1e-10, f"max |delta| {worst:.2e}"


def _check_grad(variant: MaskVariant) -> tuple[bool, str]:
    cfg = ModelConfig(layers=2, hidden=8, mlp=16, heads=2, patch=2,
                      channels=1, height=2, width=2, variant=variant)
    model = FrameDiT(cfg, seed=11, dtype=np.float64)
    rng = np.random.default_rng(11)
    # a zero output head would zero every upstream gradient and make the
    # check vacuous; give it weight before differentiating
    model.params["head.w"] = Tensor(
        rng.normal(0, 0.5, model.params["head.w"].shape), requires_grad=True
    )
    frames = rng.standard_normal((1, 2, 1, 2, 2))
    t = np.array([0.4])
    eps = rng.standard_normal(frames.shape)
    drop = np.array([False])

    def loss_with(name, tensor):
        saved = model.params[name]
        model.params[name] = tensor
        try:
            return batch_loss(model, frames, t, eps, drop, cfg.param)
        finally:
            model.params[name] = saved

    worst = max(
        grad_check(lambda p, n=name: loss_with(n, p), model.params[name])
        for name in model.params
    )
    return worst < 1e-3, f"max rel err {worst:.2e}"


def cmd_verify(args) -> int:
    checks = [
        ("rotation round trip", _check_rotation_round_trip),
        ("mask oracle F<=6", _check_mask_oracle),
        ("causality of", lambda: _check_causality(MaskVariant.OF, args.corrupt_mask)),
        ("causality of2", lambda: _check_causality(MaskVariant.OF2, args.corrupt_mask)),
        ("cache equivalence of", lambda: _check_cache_equivalence(MaskVariant.OF)),
        ("cache equivalence of2", lambda: _check_cache_equivalence(MaskVariant.OF2)),
        ("gradient check", lambda: _check_grad(MaskVariant.OF)),
    ]
    all_ok = True
    for name, func in checks:
        ok, detail = func()
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:24s} {detail}")
    print("verify:", "all checks passed" if all_ok else "FAILURES present")
    return 0 if all_ok else 1


# -- wiring ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="framediff",
        description="Frame-autoregressive video diffusion: training, generation, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--variant", choices=["of", "of2"])
    p_train.add_argument("--param", choices=["eps", "companion"])
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--precision", type=int, choices=[32, 64])
    p_train.add_argument("--paired", action="store_true",
                         help="train of and of2 from identical init and data order")
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("generate", help="roll out frames from a checkpoint")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--context", required=True, help="dataset file with context videos")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--frames", type=int, default=1)
    p_gen.add_argument("--context-frames", type=int, default=5)
    p_gen.add_argument("--guidance", type=float, default=1.0)
    p_gen.add_argument("--steps", type=int, default=50)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--precision", type=int, choices=[32, 64], default=32)
    p_gen.add_argument("--dump-pgm", action="store_true")
    p_gen.set_defaults(func=cmd_generate)

    p_probe = sub.add_parser("probe", help="linear-probe frozen features per layer")
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--data", required=True)
    p_probe.add_argument("--layers", default="all")
    p_probe.add_argument("--out", required=True)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.set_defaults(func=cmd_probe)

    p_bench = sub.add_parser("bench", help="complexity accounting and timings")
    p_bench.add_argument("--frames", default="1,2,4,8,16")
    p_bench.add_argument("--variant", choices=["of", "of2", "both"], default="both")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--layers-n", type=int, default=2)
    p_bench.add_argument("--hidden", type=int, default=64)
    p_bench.add_argument("--heads", type=int, default=4)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.set_defaults(func=cmd_bench)

    p_verify = sub.add_parser("verify", help="run the invariant suite")
    p_verify.add_argument("--corrupt-mask", action="store_true", help=argparse.SUPPRESS)
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 1
    except FramediffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
