"""Link-level MU-MIMO OFDM uplink simulator with a trainable neural receiver.

The package combines a small reverse-mode autodiff core, a simplified
transmitter chain (Gray QAM, LDPC, DMRS-style pilots, beamforming),
stochastic TDL channels, classical LS/LMMSE/K-Best baseline receivers, the
convolutional-graph neural receiver with variable-MCS support, and a
Monte-Carlo TBLER/latency evaluation harness.

SNR convention everywhere: unit symbol energy and unit average channel
gain, so SNR[dB] = -10 log10(N0).
"""

from . import autodiff
from .channel import (ChannelRealization, CirDataset, CirDatasetSource,
                      CovarianceModel, TdlChannelSource, TdlProfile,
                      apply_channel, cir_to_freq, dataset_read, dataset_write,
                      doubletdl, estimate_covariance, generate_dataset,
                      sample_tdl, tdl_a, tdl_b, tdl_c, tdl_d)
from .classical import (ChannelEstimate, app_demap, kbest_detect, lmmse_equalize,
                        lmmse_estimate, ls_estimate, masked_demap,
                        ml_detect_exhaustive)
from .constellation import Constellation, build_constellation
from .evaluation import (EvalConfig, LatencyReport, MetricsRecord, evaluate_tbler,
                         latency_bench, snr_at_tbler, write_latency_csv,
                         write_metrics_csv, write_sweep_csv)
from .ldpc import LdpcCode, build_regular_code, rate_matched_code, read_alist, write_alist
from .nrx import (NrxConfig, checkpoint_load, checkpoint_save, count_parameters,
                  init_weights, mask_llrs, nrx_forward, positional_encoding)
from .slot import (McsEntry, PilotBook, ResourceGrid, SlotConfig, TxSlot,
                   assemble_slot, beamform, default_mcs_table, generate_pilots,
                   random_payloads)
from .training import TrainConfig, fine_tune, sample_training_batch, train, train_step

__version__ = "0.1.0"
