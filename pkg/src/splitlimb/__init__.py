"""splitlimb: split learning over vertically partitioned images.

A simulation harness where k "limb" clients each hold a vertical strip of
every image and train a private first dense layer; a server (or, in the
U-shaped arrangement, the label-holding limb) trains the remaining layers.
Activations and gradients cross an explicit binary message protocol, and a
monolithic reference trainer certifies that the distributed run is
bit-identical to centralized training.
"""

from .backend import current_backend, use_backend

__version__ = "0.1.0"

__all__ = ["__version__", "current_backend", "use_backend"]
