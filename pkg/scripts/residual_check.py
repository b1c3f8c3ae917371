"""Compare high-pass residual energy of real covers and generated containers.

The +-1 embedding signal has an F0 residual RMS of about half a gray level.
A detector can only pick it up where the cover residual itself is small, so
this ratio predicts whether a steganalyser trained on a generator's output can
beat chance.

    python scripts/residual_check.py runs/desk/generators/dcgan/checkpoint_epoch015.ckpt
"""

import argparse

import numpy as np

from sgan.autodiff import Tensor, depthwise_highpass
from sgan.imaging import from_array, synth_corpus, to_array
from sgan.nets import F0_KERNEL
from sgan.stego import EmbedConfig
from sgan.harness import make_stego_pairs
from sgan.training import generate, load_generator


def residual_rms(x: np.ndarray) -> float:
    """RMS of the F0 response in gray levels for an NCHW batch in [-1, 1]."""
    r = depthwise_highpass(Tensor(x * 127.5), F0_KERNEL).data
    return float(np.sqrt(np.mean(r * r)))


def stego_delta_rms(images) -> float:
    pairs = make_stego_pairs(images, EmbedConfig(seed=0))
    x = to_array(pairs.items)
    return residual_rms(x[1::2] - x[0::2])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.5)
    args = p.parse_args()

    real = synth_corpus(args.n, args.size, seed=0, noise=args.noise).items
    print(f"{'source':<50} {'residual':>9} {'stego delta':>12}")
    print(f"{'real covers':<50} {residual_rms(to_array(real)):9.2f} {stego_delta_rms(real):12.2f}")
    for ckpt in args.checkpoints:
        ims = from_array(generate(load_generator(ckpt), args.n, seed=1))
        print(f"{ckpt[-50:]:<50} {residual_rms(to_array(ims)):9.2f} {stego_delta_rms(ims):12.2f}")
