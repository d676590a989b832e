import json, time
import numpy as np
from framediff.data import BounceParams, gen_dataset
from framediff.model import ModelConfig, FrameDiT
from framediff.trainer import TrainConfig, fit
from framediff.sampler import SamplerConfig, rollout
from framediff.probe import probe_sweep
from framediff.frame_attention import MaskVariant

DESK_MODEL = dict(layers=4, hidden=128, mlp=256, heads=4, patch=4, channels=1, height=16, width=16)
params = BounceParams(frames=8)
videos = gen_dataset(params, 101, 2048)
frames = np.stack([v.frames for v in videos])
model_config = ModelConfig(**DESK_MODEL)
out = {}
states = {}
for variant in (MaskVariant.OF, MaskVariant.OF2):
    t0 = time.perf_counter()
    config = TrainConfig(steps=2000, lr=1e-3, batch=16, seed=11, variant=variant)
    state, metrics = fit(frames, model_config, config)
    secs = time.perf_counter() - t0
    losses = [m["loss"] for m in metrics]
    state.model.save(f".scratch/desk_{variant.value}.fdck")
    json.dump(losses, open(f".scratch/desk_{variant.value}_losses.json", "w"))
    out[variant.value] = dict(initial=losses[0], first10=float(np.mean(losses[:10])),
                              final100=float(np.mean(losses[-100:])), secs=round(secs,1))
    states[variant] = state
    print(variant.value, out[variant.value], flush=True)

# criterion 8 generation eval on OF2
model = states[MaskVariant.OF2].model
eval_videos = gen_dataset(params, 202, 8)
mses, baselines = [], []
for video in eval_videos:
    context = [video.frames[i].astype(np.float64) for i in range(7)]
    gen = rollout(model, context, SamplerConfig(steps=50, seed=9, frames_to_generate=1))
    truth = video.frames[7]
    mses.append(float(np.mean((gen[0] - truth) ** 2)))
    baselines.append(float(np.mean((video.frames[6] - truth) ** 2)))
out["gen"] = dict(mse=float(np.mean(mses)), copy_last=float(np.mean(baselines)))
print("gen", out["gen"], flush=True)

# criterion 10 probes
probe_videos = gen_dataset(params, 303, 512)
layers = [1, 2, 3, 4]
for tag, m in (("of", states[MaskVariant.OF].model), ("of2", states[MaskVariant.OF2].model),
               ("random", FrameDiT(model_config, seed=999, dtype=np.float32))):
    t0 = time.perf_counter()
    rep = probe_sweep(m, probe_videos, layers, seed=7)
    out[f"probe_{tag}"] = {str(e.layer): round(e.accuracy, 4) for e in rep.entries}
    out[f"probe_{tag}"]["best"] = round(rep.best().accuracy, 4)
    out[f"probe_{tag}"]["secs"] = round(time.perf_counter() - t0, 1)
    print("probe", tag, out[f"probe_{tag}"], flush=True)

json.dump(out, open(".scratch/desk_results.json", "w"), indent=1)
print("DONE", flush=True)
