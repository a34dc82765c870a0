"""Follow one synthetic sample through the model and print the 7x7 scene attention.

Trains briefly first so the attention has something to say.

    python demos/attention_walkthrough.py
"""
import numpy as np

from sgapgaze import autodiff as ad
from sgapgaze.model import collate, forward
from sgapgaze.synth import SynthConfig, generate_synthetic
from sgapgaze.training import TrainConfig, prepare_synthetic, train

cfg = TrainConfig(epochs=4)
syn = generate_synthetic(1, 400, SynthConfig(samples_per_driver=100))
samples = prepare_synthetic(syn, cfg)
params = train(samples[:300], cfg).params

s = samples[350]
with ad.no_grad():
    out = forward(params, collate([s]), cfg.model)
alpha = out.pog.alpha.data[0].reshape(7, 7)
np.set_printoptions(precision=2, suppress=True)
print("attention over the scene grid (row 0 = top):")
print(alpha)
r, c = np.unravel_index(alpha.argmax(), alpha.shape)
print(f"peak cell row {r} col {c}; ground truth falls in row {int(s.pog[1] * 7)} col {int(s.pog[0] * 7)}")
print("p_hat  ", out.pog.p_hat.data[0])
print("delta_p", out.pog.delta_p.data[0])
print("p_final", out.pog.p_final.data[0], " truth", s.pog)
print("iris gate", s.gate, " iris vector", s.i_c)
