"""Edge-offloaded semantic segmentation for selective harvesting, in simulation.

Subpackages: ``core`` (frames and envelopes), ``tcpros`` and ``mqtt``
(transports), ``netem`` (network emulation and the event scheduler),
``perception``, ``occmap``, ``metrics``, ``energy`` and ``harness``.
"""

__version__ = "0.1.0"
