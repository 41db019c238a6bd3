"""Product differentiation, demand and entry in an embedding space.

Modules
-------
geometry    distances, PCA reduction, ring counts, nearest neighbours
demand      random-coefficient nested logit shares, inversion, welfare
estimation  OLS, 2SLS and GMM estimation of demand
supply      Bertrand pricing, marginal cost recovery, fixed-cost slopes
policy      protection-radius counterfactuals and welfare heatmaps
panel       fixed-effects regressions and event studies
synth       synthetic data generating processes
io          file formats and run manifests
cli         command-line entry point
"""

__version__ = "0.1.0"
