from .annotations import (
    ChatItem, ChoiceItem, Detection, IngestStats, RegionAnnotation, RegionEntry, V7wItem, VcrItem,
    ingest_coco_json, read_annotations, write_annotations,
)
from .convert import (
    STAGE_OF_SOURCE, augment_chat_with_boxes, convert_detection, convert_multi_region_caption,
    convert_refexp, convert_region_caption, convert_v7w, convert_vcr_chat, convert_vcr_choice,
    substitute_categories,
)
from .rng import Lcg, item_rng
from .templates import MULTI_BANK, SINGLE_BANK, VCR_BANK, TemplateBank
from .dispatch import SOURCES, ConvertResult, convert_file, convert_one, fixture_dir, load_items, load_manifest
