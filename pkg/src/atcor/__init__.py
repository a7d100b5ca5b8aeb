"""Station-level bike usage forecasting for network reconfiguration.

Subpackages by pipeline stage: ``ingest`` (trip/weather/POI parsing),
``grid`` (station-centered heatmaps), ``cluster`` (signature K-means),
``model`` (the attention conv-recurrent predictor), ``train``, ``coldstart``
(inverse-distance virtual history), ``evaluate`` (metrics and protocols),
``service`` (read-only HTTP API) and ``cli``.
"""

__version__ = "0.1.0"
