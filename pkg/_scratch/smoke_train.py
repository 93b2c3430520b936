import logging, time, json
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
from nrxsim import training as tr
from nrxsim.channel import doubletdl
from nrxsim.nrx import NrxConfig, init_weights, checkpoint_save
from nrxsim.slot import SlotConfig, default_mcs_table

table = default_mcs_table()
slot_cfg = SlotConfig()
config = NrxConfig.from_table(table, (14,), variant="single", d_s=16, num_iterations=4)
w = init_weights(config, seed=42)
tcfg = tr.TrainConfig(batch_size=16, steps=1500, snr_lo_db=0.0, snr_hi_db=9.0,
                      supported_mcs=(14,), seed=42, log_every=100)
res = tr.train(w, config, slot_cfg, doubletdl(), tcfg, table)
checkpoint_save("/root/pkg/_scratch/smoke1500.nrxw", config, w)
print("done", res.wall_time_s)
