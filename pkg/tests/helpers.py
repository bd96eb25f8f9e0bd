import numpy as np

from aro_lab.audio import AudioClip
from aro_lab.models import AsrModel, SrmModel


def untrained_asr(arch="A", seed=0):
    m = AsrModel(arch, seed=seed)
    return m.set_params_arrays(m.init_params())


def untrained_srm(seed=0):
    m = SrmModel(seed=seed)
    return m.set_params_arrays(m.init_params())


def noise_clip(n=1600, seed=0, amp=0.5, clip_id="noise"):
    rng = np.random.default_rng(seed)
    return AudioClip(clip_id, 8000, rng.uniform(-amp, amp, n))
