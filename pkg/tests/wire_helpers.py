"""Helper wire servers spawned by the wire tests.

Usage: python3 wire_helpers.py {echo8|bad-distributions|slow}
"""

import sys
import time

import numpy as np

from reason_iad.backend import (EVALUATE, GENERATE, IMAGE_ENCODE, TEXT_ENCODE,
                                EvaluationResult, ModelBackend)
from reason_iad.wire import serve_stdio

# Awkward values that only survive exact round-trip serialization.
ECHO_VECTOR = np.array([np.pi, 1.0 / 3.0, -2.0 ** -45, 1e300, -1e-300,
                        0.1 + 0.2, 123456789.123456789, -0.0])


class EchoBackend(ModelBackend):
    """d=8 backend returning a fixed awkward vector for every text."""

    capabilities = frozenset({TEXT_ENCODE, IMAGE_ENCODE, EVALUATE, GENERATE})
    dimension = 8

    @property
    def neutral_token_embedding(self):
        return ECHO_VECTOR.copy()

    def encode_text(self, text):
        return ECHO_VECTOR.copy()

    def encode_image(self, image_ref):
        return ECHO_VECTOR.copy(), np.stack([ECHO_VECTOR, -ECHO_VECTOR])

    def evaluate(self, sequence, latent_positions, patch_positions, num_options):
        m = len(latent_positions)
        dists = np.full((m, num_options), 1.0 / num_options)
        attention = (np.full((m, len(patch_positions)), 1.0 / len(patch_positions))
                     if patch_positions else np.zeros((m, 0)))
        return EvaluationResult(distributions=dists, attention=attention,
                                latent_positions=tuple(latent_positions))

    def generate(self, sequence, latent_positions, patch_positions):
        return "echo explanation"


class BadDistributionBackend(EchoBackend):
    """Violates the evaluate contract: rows sum to 0.9."""

    def evaluate(self, sequence, latent_positions, patch_positions, num_options):
        m = len(latent_positions)
        dists = np.full((m, num_options), 0.9 / num_options)
        attention = (np.full((m, len(patch_positions)), 1.0 / len(patch_positions))
                     if patch_positions else np.zeros((m, 0)))
        return EvaluationResult(distributions=dists, attention=attention,
                                latent_positions=tuple(latent_positions))


class SlowBackend(EchoBackend):
    def encode_text(self, text):
        time.sleep(5.0)
        return ECHO_VECTOR.copy()


def main():
    kind = sys.argv[1] if len(sys.argv) > 1 else "echo8"
    backend = {"echo8": EchoBackend,
               "bad-distributions": BadDistributionBackend,
               "slow": SlowBackend}[kind]()
    serve_stdio(backend)


if __name__ == "__main__":
    main()
