"""Canonical label names and their fixed ordering."""

IMAGE_LABEL = "pe_present_on_image"

STUDY_LABELS = (
    "negative_for_pe",
    "indeterminate",
    "leftsided",
    "rightsided",
    "central",
    "rvlv_gte_1",
    "rvlv_lt_1",
    "chronic",
    "acute_and_chronic",
)

# Stage-1 head: image label first, then the nine study labels.
STAGE1_OUTPUTS = (IMAGE_LABEL,) + STUDY_LABELS

LATERALITY = ("leftsided", "rightsided", "central")
RVLV = ("rvlv_gte_1", "rvlv_lt_1")
CHRONICITY = ("chronic", "acute_and_chronic")
NO_PE = ("negative_for_pe", "indeterminate")

INDEX = {name: i for i, name in enumerate(STUDY_LABELS)}
