# %% [markdown]
# # Reading a discrete network out of relaxation parameters
#
# Three independent rules turn continuous parameters into structure:
# operation (argmax of alpha), width (beta magnitudes) and depth (dense-block
# gammas).  Each can be exercised on its own.

# %%
import numpy as np

from modnas.derivation import (
    WidthDerivationConfig,
    derive_depth,
    derive_operation,
    derive_width,
    export_arch,
    load_fixture,
)
from modnas.search_space import DEFAULT_NL

# %% [markdown]
# ## Operation
#
# Softmax is monotone, so the argmax of the raw logits is all that matters.
# Adding a constant to every logit changes nothing.

# %%
alpha = np.array([0.1, 0.3, -0.2, 1.4, 0.0, 0.2, 0.9])
print("chosen:", derive_operation(alpha, DEFAULT_NL).label)
print("after shift:", derive_operation(alpha + 7.0, DEFAULT_NL).label)

# %% [markdown]
# ## Width
#
# Keep the fewest channels, in multiples of 8, whose |beta| adds up to at
# least 90% of the total.  Rescaling beta leaves the choice unchanged.

# %%
rng = np.random.default_rng(3)
beta = rng.laplace(0, 1, 48) * (rng.random(48) < 0.4)
for cov in (0.5, 0.9, 0.99):
    wc = derive_width(beta, WidthDerivationConfig(coverage=cov))
    print(f"coverage {cov:.2f}: keep {wc.width:2d} of 48 channels")
print("x100 rescale:", derive_width(beta * 100).width)

# %% [markdown]
# ## Depth
#
# Layer l of a dense block either applies its own operation (path l) or
# forwards an earlier feature unchanged, whichever gamma entry is largest.
# Below, layer 3 forwards the output of layer 1, so layer 2 feeds nothing
# and is dropped along with layer 3's own operation.

# %%
gammas = [np.array([0.0, 2.0]), np.array([0.0, 0.1, 2.0]), np.array([0.0, 3.0, 0.2, 0.1])]
d = derive_depth(gammas)
print("input paths:", d.input_paths, " live layers:", d.live)

# %% [markdown]
# ## A complete architecture file
#
# The bundled reference network in its portable JSON form (opening lines only).

# %%
arch = load_fixture("modnas_b")
text = export_arch(arch)
print(text[:600], "...")
print(f"{len(text):,} characters, {sum(1 for _ in arch.stages[0].layers())} layers")
