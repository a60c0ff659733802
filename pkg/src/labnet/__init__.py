"""labnet: desk-scale laboratory monitoring stack.

Node agents answer UDP polls or push points over HTTP, a collector
forwards everything into an embedded time-series store behind an HTTP
API, an alert engine watches thresholds, ramp rates and the laser seed
interlock, and an analysis toolkit computes correlation matrices, lagged
cross-correlations, spectra and stability summaries. A scenario
simulator provides planted ground truth for all of it.
"""

__version__ = "0.1.0"
