"""Desk-scale pipeline from a single motion-blurred image to the sharp
frame sequence behind it: a ConvLSTM video autoencoder learns per-pixel
flows, a blurred-image encoder mimics its motion representation, and a
residual-dense network deblurs the central frame. Everything runs on a
from-scratch reverse-mode tape over numpy.

Submodules: autodiff, kernels, nn, warp, models, losses, datagen, trainer,
checkpoint, checks, cli.
"""

__version__ = "0.1.0"
