import json, time
import numpy as np
from framediff.data import BounceParams, gen_dataset
from framediff.model import ModelConfig, FrameDiT
from framediff.trainer import TrainConfig, TrainState, train_step
from framediff.rng import substream

videos = gen_dataset(BounceParams(), seed=0, count=512)
frames = np.stack([v.frames for v in videos])
cfg = ModelConfig(layers=4, hidden=128, mlp=256, heads=4, patch=4, channels=1, height=16, width=16)
results = {}
for lr in (1e-4, 3e-4, 1e-3):
    model = FrameDiT(cfg, seed=0, dtype=np.float32)
    state = TrainState.fresh(model)
    tc = TrainConfig(steps=400, lr=lr, batch=16, seed=0)
    rng = substream(0, "batch")
    order = rng.permutation(512)
    pos = 0
    t0 = time.perf_counter()
    for step in range(400):
        if pos + 16 > 512:
            order = rng.permutation(512); pos = 0
        train_step(state, frames[order[pos:pos+16]], tc)
        pos += 16
    hist = state.loss_history
    results[str(lr)] = dict(first=float(np.mean(hist[:10])), mid=float(np.mean(hist[190:210])),
                            last=float(np.mean(hist[-20:])), secs=round(time.perf_counter()-t0, 1))
    print(lr, results[str(lr)], flush=True)
json.dump(results, open(".scratch/lr_probe.json", "w"), indent=1)
