"""Column layout shared by every module.

The names here are the CSV headers of the episode files (see SCHEMA.md) and
the order of the state vector used by all learners.
"""

STATIC_FIELDS = ("sex", "sepsis", "weight", "age", "mortality_90d", "icu_readmission")

TIME_VARIABLES = (
    "paco2", "pao2", "spo2",
    "sys_bp", "dia_bp", "mean_bp", "gcs", "heart_rate", "pf_ratio",
    "temperature", "resp_rate", "spont_vt", "shock_index", "urine_output",
    "total_iv_fluids", "cum_fluid_balance", "sirs", "sofa", "map",
    "oxygenation_index",
)

VENT_SETTINGS = ("vt_set", "peep", "fio2")

# per-step columns of a RawEpisode / EpisodeRecord, in storage order
STEP_COLUMNS = TIME_VARIABLES + VENT_SETTINGS

# the 15 observable state features, in state-vector order
STATE_FEATURES = (
    "sepsis", "weight", "age", "heart_rate", "resp_rate", "spo2", "pf_ratio",
    "spont_vt", "map", "paco2", "sys_bp", "dia_bp", "cum_fluid_balance",
    "pao2", "gcs",
)
STATE_COLUMNS = STATE_FEATURES + ("z",)
STATE_DIM = len(STATE_COLUMNS)

STATIC_STATE = ("sepsis", "weight", "age")
DYNAMIC_FEATURES = tuple(f for f in STATE_FEATURES if f not in STATIC_STATE)
STATIC_IDX = tuple(STATE_FEATURES.index(f) for f in STATIC_STATE)
DYNAMIC_IDX = tuple(STATE_FEATURES.index(f) for f in DYNAMIC_FEATURES)
SPO2_IDX = STATE_FEATURES.index("spo2")
SPO2_DYN_IDX = DYNAMIC_FEATURES.index("spo2")
Z_IDX = STATE_COLUMNS.index("z")

TYPE_FEATURES = (
    "sofa", "sirs", "shock_index", "total_iv_fluids", "urine_output",
    "mean_bp", "sex", "icu_readmission", "temperature", "oxygenation_index",
)

FEATURE_GROUPS = {
    "hemodynamic": ("heart_rate", "sys_bp", "dia_bp"),
    "respiratory": ("resp_rate", "spont_vt", "pf_ratio", "map"),
    "blood_gas": ("spo2", "paco2", "pao2"),
    "misc": ("sepsis", "weight", "age", "gcs", "cum_fluid_balance"),
}
GROUP_ORDER = ("hemodynamic", "respiratory", "blood_gas", "misc")

# columns excluded from winsorizing
BINARY_FIELDS = ("sex", "sepsis", "mortality_90d", "icu_readmission")

MAX_STEPS = 18
