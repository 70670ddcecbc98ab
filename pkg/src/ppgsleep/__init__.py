"""Sleep staging from raw PPG and pulse-rate time series.

Pipeline: record ingestion (EDF / CSV + stage labels), signal conditioning
(zero-phase low-pass, resampling to 2048/60 Hz, clip + standardize), compact
CNN+TCN stagers built on a small reverse-mode tensor engine, a multi-source
leave-one-domain-out training protocol, and the agreement-statistics suite
(per-patient and pooled kappa, sleep measures, Bland-Altman, Wilcoxon,
error regression).
"""

__version__ = "0.1.0"
