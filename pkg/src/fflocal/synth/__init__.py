from .dataset import (
    DatasetConfig,
    Manifest,
    SampleRecord,
    balanced_sampler,
    build_manifest,
    check_record,
    read_manifest,
    render_record,
)
from .faces import (
    EDITED,
    GENERATED,
    REAL,
    ForensicType,
    SourceClass,
    gen_edit_pair,
    gen_fake_face,
    gen_real_face,
)
from .masks import FreeFormMaskParams, composite_edited, gen_freeform_mask
