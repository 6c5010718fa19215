"""boregan: GAN-based gap filling for borehole microresistivity images.

A small numpy stack: taped reverse-mode autodiff, an encoder-decoder
generator with two Wasserstein critics, synthetic stripe masking, WGAN
training with weight clipping, and an evaluation harness against a
linear-interpolation baseline. Hot convolution kernels run through numba
when available, with a pure-numpy lane selected by ``BOREGAN_BACKEND``.
"""

__version__ = "0.1.0"
