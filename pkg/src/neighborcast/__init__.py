"""Retrieval-augmented multivariate time-series forecasting.

Train a hybrid spatial-temporal encoder, cache its representation of every
training window in a key-value datastore, and at inference interpolate the
encoder's forecast with the futures attached to the K nearest cached
representations.
"""

__version__ = "0.1.0"

from .data import (MtsDataset, Normalizer, Sample, SplitSpec, SynthConfig,
                   chronological_split, fit_normalizer, load_dataset,
                   make_windows, prepare_split, synth_generate)
from .datastore import (Datastore, IvfIndex, RetrievalResult, build_datastore,
                        build_ivf, knn_approx, knn_exact, load_store,
                        save_store, subsample)
from .encoder import EncoderConfig, encode_and_predict, init_params
from .forecaster import (EvalReport, ForecastConfig, Forecaster, evaluate,
                         interpolate, lambda_coef, neighbor_weights)
from .graph import DependencyGraph, adaptive_adjacency, transition_matrices
from .trainer import (AdamState, TrainConfig, adam_step, fit, grad_check,
                      masked_mae_loss)
