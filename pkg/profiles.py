"""
Named simulated device classes
"""

from dataclasses import dataclass

from errors import SpecError
from simulator import LatencyModel, PowerModel


@dataclass(frozen=True)
class DeviceProfile:
    """Calibration knobs of one simulated accelerator; not measured data"""
    name: str
    latency: LatencyModel
    power: PowerModel
    kv_budget_tokens: float
    kv_tokens_per_request_token: float = 1.0
    swap_bandwidth: float = 100_000.0


class ProfileCache:
    _profiles = {}

    @staticmethod
    def load():
        # High-TDP class: memory-bound decode draws close to idle power at any
        # serving batch size, so per-iteration time is what batching amortizes
        ProfileCache._profiles["hi-tdp"] = DeviceProfile(
            "hi-tdp",
            LatencyModel(
                prefill_base_s=0.0005,
                prefill_per_token_s=0.00001,
                decode_base_s=0.0004,
                decode_per_seq_s=0.0004,
                comm_s=0.00004,
                step_base_s=0.02,
                step_per_image_s=0.08,
                encode_s=0.05,
                decode_image_s=0.2,
            ),
            PowerModel(p_idle=140.0, p_max=700.0, kappa=1.0, b_ref=65536.0, rho_prefill=0.9, rho_denoise=0.95),
            kv_budget_tokens=400_000.0,
        )

        # Mid-TDP class
        ProfileCache._profiles["mid-tdp"] = DeviceProfile(
            "mid-tdp",
            LatencyModel(
                prefill_base_s=0.0008,
                prefill_per_token_s=0.000016,
                decode_base_s=0.0006,
                decode_per_seq_s=0.0006,
                comm_s=0.00006,
                step_base_s=0.03,
                step_per_image_s=0.14,
                encode_s=0.08,
                decode_image_s=0.3,
            ),
            PowerModel(p_idle=80.0, p_max=400.0, kappa=1.0, b_ref=65536.0, rho_prefill=0.9, rho_denoise=0.95),
            kv_budget_tokens=150_000.0,
            swap_bandwidth=60_000.0,
        )

    @staticmethod
    def get(name):
        if not ProfileCache._profiles:
            ProfileCache.load()
        try:
            return ProfileCache._profiles[name]
        except KeyError:
            known = ", ".join(sorted(ProfileCache._profiles))
            raise SpecError(f"unknown device profile {name!r} (known: {known})") from None
