"""Train the toy unified tokenizer for a short run and reconstruct an image.

The model reconstructs procedurally generated shape images while aligning a
pooled embedding with learned class embeddings (the contrastive tower), with
an MCQ bottleneck in between. A short run is enough to watch PSNR and
zero-shot accuracy climb together.

Run:  python demos/03_train_tokenizer.py
"""

import os

import numpy as np

from vqkit import TrainConfig, fit
from vqkit.data import save_ppm
from vqkit.model import decode, encode
from vqkit.quantize import quantize_mcq_batch

cfg = TrainConfig()
cfg.steps = 600
cfg.eval_interval = 150
cfg.data.count = 2048

print(f"{'step':>5s} {'recon':>8s} {'vq':>8s} {'contra':>8s} {'psnr':>7s} {'zs_acc':>7s}")

def progress(row):
    print(f"{row['step']:5d} {row['recon']:8.4f} {row['vq']:8.4f} "
          f"{row['contrastive']:8.4f} {row['psnr']:7.2f} {row['zs_acc']:7.3f}")

state = fit(cfg, progress=progress)

# round-trip one held-out image through encoder -> MCQ -> decoder
image = state.held.images[0]
latents, _embedding = encode(state.model, image)
_, quantized, _ = quantize_mcq_batch(state.model.quantizer, latents, count_usage=False)
reconstruction = decode(state.model, quantized)

mse = float(((image - reconstruction) ** 2).mean())
print(f"\nround-trip of one held-out image: mse {mse:.5f} "
      f"({10 * np.log10(1 / mse):.2f} dB)")

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)
save_ppm(image, os.path.join(out_dir, "original.ppm"))
save_ppm(reconstruction, os.path.join(out_dir, "reconstruction.ppm"))
print(f"wrote {out_dir}/original.ppm and {out_dir}/reconstruction.ppm")
print(f"temperature learned: {state.model.temperature:.4f}")
