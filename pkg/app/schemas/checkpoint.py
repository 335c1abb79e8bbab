"""Checkpoint manifest schemas"""
from typing import List, Literal

from pydantic import BaseModel, Field, model_validator

FORMAT_VERSION = 1
BYTES_PER_VALUE = 4


class TensorRecord(BaseModel):
    """One manifest line: where a named tensor lives inside weights.bin"""
    name: str
    dtype: Literal["f32"] = "f32"
    shape: List[int]
    offset: int = Field(ge=0)
    length: int = Field(ge=0)  # bytes
    format_version: int = FORMAT_VERSION

    @model_validator(mode="after")
    def check_length(self) -> "TensorRecord":
        count = 1
        for dim in self.shape:
            if dim < 0:
                raise ValueError(f"{self.name}: negative dimension")
            count *= dim
        if self.length != count * BYTES_PER_VALUE:
            raise ValueError(
                f"{self.name}: length {self.length} does not match shape {self.shape}"
            )
        return self

    @property
    def end(self) -> int:
        return self.offset + self.length
