# %% [markdown]
# # How many unfolded stages?
#
# Each stage refines the previous estimate and then blends it with the noisy
# input: `x_t = delta_t * y + (1 - delta_t) * f_t(x_{t-1})`.  This script
# looks at what that costs and what it buys.

# %%
import numpy as np

from modnas import autodiff as ad
from modnas.autodiff import Tensor
from modnas.derivation import load_fixture, replicate_stages
from modnas.engine import SearchConfig, search
from modnas.io import bundled_images
from modnas.metrics import count_macs, count_params, plain_conv_net
from modnas.search_space import mod_unfold_forward

# %% [markdown]
# ## Cost grows linearly with T
#
# Stages share a topology but not weights, so parameters and MACs scale with
# the stage count.  The only extra parameter per stage is its delta, which the
# counters ignore.

# %%
base = load_fixture("modnas_b")
plain = plain_conv_net(depth=17, width=64)
print(f"{'network':<22}{'params':>12}{'GMACs@128':>12}")
print(f"{'17-layer plain conv':<22}{count_params(plain):>12,}{count_macs(plain, 128, 128) / 1e9:>12.3f}")
for t in (1, 2, 3, 4):
    arch = replicate_stages(base, t)
    print(f"{f'searched U-net, T={t}':<22}{count_params(arch):>12,}{count_macs(arch, 128, 128) / 1e9:>12.3f}")

# %% [markdown]
# ## The blend at its extremes
#
# delta = 1 returns the noisy input untouched, whatever the stages compute.
# delta = 0 is a plain cascade of the stages.

# %%
y = Tensor(np.linspace(0, 1, 16, dtype=np.float32).reshape(1, 1, 4, 4))
halve = lambda x: Tensor(x.data * 0.5)  # noqa: E731
for d in (1.0, 0.5, 0.0):
    delta = Tensor(np.array([d], dtype=np.float32))
    out = mod_unfold_forward(y, [halve, halve], [delta, delta])
    print(f"delta={d}: output / input = {float(out.data[0, 0, 3, 3] / y.data[0, 0, 3, 3]):.3f}")

# %% [markdown]
# ## A short search at T = 1, 2 and 3
#
# The same 15-epoch budget for each stage count (about two and a half minutes
# in total).  Budgets this small leave extra stages undertrained, so do not
# read a trend into the numbers: on the bundled images T=2 tends to come out
# ahead while T=3 has not yet caught up with the noisy input.  Swap in a real
# dataset and epoch count to run the actual comparison.

# %%
images = bundled_images()[:12]
for t in (1, 2, 3):
    cfg = SearchConfig(epochs=15, warmup_epochs=5, patch=32, channels=8, stages=t, seed=0)
    net, log = search(images, cfg)
    deltas = [round(float(ad.sigmoid(d).data[0]), 3) for d in net.delta_logits]
    print(f"T={t}: final validation {log.records[-1].val_psnr:.2f} dB "
          f"(noisy {log.noisy_psnr:.2f} dB), delta {deltas}")
