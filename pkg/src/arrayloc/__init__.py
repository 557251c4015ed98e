"""Active speaker detection and horizontal localization from
microphone-array audio: superdirective beamforming front end, log-mel
features, a confidence-regression network and VOC-style evaluation."""

__version__ = "0.1.0"
