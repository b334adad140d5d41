from .formats import read_container, read_prompt_file, write_container, write_prompt_file
from .export import (
    DEFAULT_PROMPTS,
    Encoder,
    ExportJob,
    ExportResult,
    export_image_features,
    export_prompt_embeddings,
)

__all__ = [
    "DEFAULT_PROMPTS",
    "Encoder",
    "ExportJob",
    "ExportResult",
    "export_image_features",
    "export_prompt_embeddings",
    "read_container",
    "read_prompt_file",
    "write_container",
    "write_prompt_file",
]
