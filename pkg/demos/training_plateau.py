"""Plain stochastic gradient descent on transfer functions of growing length.

Each curve idles on a plateau before the loss falls by more than a decade.
The block-coordinate "sweep" optimizer is run on the longest function for
comparison.

    python3 demos/training_plateau.py
"""
import numpy as np

from qaspen.liouville import build_liouville, spin_boson
from qaspen.noise import CorrelationSpec, SpectralDensity, build_correlation_matrix
from qaspen.stt_kernel import ChebyshevBasis, TrainingConfig, exact_target, train

ls = build_liouville(spin_boson(), "intrinsic")
bases = [ChebyshevBasis(10, lo, hi) for lo, hi in ls.frequency_range()]
table = build_correlation_matrix(CorrelationSpec("intrinsic", 1.0, SpectralDensity()), 0.25, 8, 4).causal


def summary(curve, every=40):
    return " ".join(f"{np.mean(curve[i:i + every]):.1e}" for i in range(0, len(curve), every))


sgd = TrainingConfig(batch=512, learning_rate=0.1, decay=0.5, decay_every=133, max_steps=400,
                     target_loss=0.0)
for n in (2, 3, 4, 5):
    result = train(exact_target(table, n, 2), n, bases, sgd, complex_valued=True)
    print(f"sgd   T_{n}: {summary(result.curve)}")

sweep = TrainingConfig(batch=2048, learning_rate=1.0, decay=1.0, max_steps=400, optimizer="sweep",
                       target_loss=1e-14)
result = train(exact_target(table, 5, 2), 5, bases, sweep, complex_valued=True)
print(f"sweep T_5: {summary(result.curve)}")
