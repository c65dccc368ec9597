# %% [markdown]
# # From supernet to trained denoiser
#
# A miniature version of the full workflow on the bundled 64x64 images:
# search a two-stage supernet, read off one discrete network, train it from
# scratch and measure it on held-out images.  Budgets are tiny so the script
# finishes in about a minute; raise them for real results.
#
# Run with `python demos/01_pipeline_walkthrough.py`.

# %%
import time

from modnas.derivation import derive_architecture, instantiate_derived
from modnas.engine import SearchConfig, TrainConfig, evaluate, search, train_network
from modnas.io import bundled_images
from modnas.metrics import count_macs, count_params

images = bundled_images()
train, test = images[:12], images[12:]
print(f"{len(train)} training images, {len(test)} held out, each {train[0].width}x{train[0].height}")

# %% [markdown]
# ## Search
#
# Weights and architecture parameters take turns: one ADAM step on the
# weights using half of the training images, then one on alpha, beta,
# gamma and delta using the other half.  During warm-up only the weights move.

# %%
cfg = SearchConfig(epochs=8, warmup_epochs=3, patch=32, channels=8, stages=2, seed=0)
t0 = time.perf_counter()
net, log = search(train, cfg, progress=lambda r: print(
    f"  epoch {r.epoch:2d}  lr_w {r.lr_w:.2e}  lr_a {r.lr_a:.2e}  loss {r.loss:.5f}  val {r.val_psnr:.2f} dB"))
print(f"search took {time.perf_counter() - t0:.0f}s; noisy validation input sits at {log.noisy_psnr:.2f} dB")

# %% [markdown]
# The relaxation weights delta are sigmoids of free logits.  Both start at
# 0.5 and drift once the architecture phase begins.  The operation logits
# alpha start at zero too; after five architecture epochs they have only
# begun to separate, but the argmax already decides the derived operation.

# %%
print("delta per stage:", [round(float(d.data[0]), 3) for d in net.deltas()])
alpha = net.state.arch["eb1.l1.alpha"].data
for spec, a in zip(net.config.unet.nl.candidates, alpha):
    print(f"  eb1.l1 {spec.label:<22} {a:+.5f}")

# %% [markdown]
# ## Derivation
#
# Each mixed layer keeps its highest-weight operation.  Widths come from the
# beta magnitudes (smallest multiple of 8 keeping 90% of the total) and the
# dense-block gammas decide which layers survive.

# %%
arch = derive_architecture(net.state, input_size=64)
for blk in arch.stages[0].blocks:
    ops = ", ".join(f"{l.op.label}->{l.c_out}" for l in blk.layers)
    print(f"  {blk.name:<5} {ops}")
for note in arch.notes:
    print("  note:", note)
print(f"{count_params(arch):,} parameters, {count_macs(arch, 128, 128) / 1e9:.3f}G MACs at 128x128")

# %% [markdown]
# ## Training the derived network
#
# The derived network starts from fresh weights; nothing is inherited from
# the supernet.

# %%
derived = instantiate_derived(arch, seed=0)
rows = train_network(derived, train, TrainConfig(steps=120, patch=32, lr_max=3e-3))
print(f"training loss {rows[0][2]:.5f} -> {rows[-1][2]:.5f}")

report = evaluate(derived, test, sigma_8bit=25, seed=0, arch=arch)["average"]
print(f"held-out PSNR {report['psnr_db']:.2f} dB (noisy input {report['noisy_psnr_db']:.2f} dB), "
      f"SSIM {report['ssim']:.3f}")
