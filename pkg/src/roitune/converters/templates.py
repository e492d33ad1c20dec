"""Question template banks and task prompts."""
from __future__ import annotations

from dataclasses import dataclass

SINGLE_REGION_CAPTION = (
    "Can you provide me with a detailed description of the region in the picture marked by <region1>?",
    "I'm curious about the region represented by <region1> in the picture. Could you describe it in detail?",
    "What can you tell me about the region indicated by <region1> in the image?",
    "I'd like to know more about the area in the photo labeled <region1>. Can you give me a detailed description?",
    "Could you describe the region shown as <region1> in the picture in great detail?",
    "What details can you give me about the region outlined by <region1> in the photo?",
    "Please provide me with a comprehensive description of the region marked with <region1> in the image.",
    "Can you give me a detailed account of the region labeled as <region1> in the picture?",
    "I'm interested in learning more about the region represented by <region1> in the photo. Can you describe it in detail?",
    "What is the region outlined by <region1> in the picture like? Could you give me a detailed description, please?",
    "Can you provide me with a detailed description of the region in the picture marked by <region1>, please?",
    "I'm curious about the region represented by <region1> in the picture. Could you describe it in detail, please?",
    "What can you tell me about the region indicated by <region1> in the image, exactly?",
    "I'd like to know more about the area in the photo labeled <region1>, please. Can you give me a detailed description?",
    "Could you describe the region shown as <region1> in the picture in great detail, please?",
    "What details can you give me about the region outlined by <region1> in the photo, please?",
    "Please provide me with a comprehensive description of the region marked with <region1> in the image, please.",
    "Can you give me a detailed account of the region labeled as <region1> in the picture, please?",
    "I'm interested in learning more about the region represented by <region1> in the photo. Can you describe it in detail, please?",
    "What is the region outlined by <region1> in the picture like, please? Could you give me a detailed description?",
)

MULTI_REGION_CAPTION = (
    "Could you please give me a detailed description of these areas [<region1>, <region2>, ...]?",
    "Can you provide a thorough description of the regions [<region1>, <region2>, ...] in this image?",
    "Please describe in detail the contents of the boxed areas [<region1>, <region2>, ...].",
    "Could you give a comprehensive explanation of what can be found within [<region1>, <region2>, ...] in the picture?",
    "Could you give me an elaborate explanation of the [<region1>, <region2>, ...] regions in this picture?",
    "Can you provide a comprehensive description of the areas identified by [<region1>, <region2>, ...] in this photo?",
    "Help me understand the specific locations labeled [<region1>, <region2>, ...] in this picture in detail, please.",
    "What is the detailed information about the areas marked by [<region1>, <region2>, ...] in this image?",
    "Could you provide me with a detailed analysis of the regions designated [<region1>, <region2>, ...] in this photo?",
    "What are the specific features of the areas marked [<region1>, <region2>, ...] in this picture that you can describe in detail?",
    "Could you elaborate on the regions identified by [<region1>, <region2>, ...] in this image?",
    "What can you tell me about the areas labeled [<region1>, <region2>, ...] in this picture?",
    "Can you provide a thorough analysis of the specific locations designated [<region1>, <region2>, ...] in this photo?",
    "I am interested in learning more about the regions marked [<region1>, <region2>, ...] in this image. Can you provide me with more information?",
    "Could you please provide a detailed description of the areas identified by [<region1>, <region2>, ...] in this photo?",
    "What is the significance of the regions labeled [<region1>, <region2>, ...] in this picture?",
    "I would like to know more about the specific locations designated [<region1>, <region2>, ...] in this image. Can you provide me with more information?",
    "Can you provide a detailed breakdown of the regions marked [<region1>, <region2>, ...] in this photo?",
    "What specific features can you tell me about the areas identified by [<region1>, <region2>, ...] in this picture?",
    "Could you please provide a comprehensive explanation of the locations labeled [<region1>, <region2>, ...] in this image?",
)

VCR_FOLLOW_UP = (
    "Why?",
    "What's the rationale for your decision",
    "What led you to that conclusion?",
    "What's the reasoning behind your opinion?",
    "Can you explain the basis for your thinking?",
    "What factors influenced your perspective?",
    "How did you arrive at that perspective?",
    "What evidence supports your viewpoint?",
    "What's the logic behind your argument?",
    "Can you provide some context for your opinion?",
    "What's the basis for your assertion?",
    "What experiences have shaped your perspective?",
    "What assumptions underlie your reasoning?",
    "What's the foundation of your assertion?",
    "What's the source of your reasoning?",
    "What's the motivation behind your decision?",
    "What's the impetus for your belief?",
    "What's the driving force behind your conclusion?",
    "What's your reasoning?",
    "What makes you say that?",
    "What's the story behind that?",
    "What's your thought process?",
    "What's the deal with that?",
    "What's the logic behind it?",
    "What's the real deal here?",
    "What's the reason behind it?",
    "What's the rationale for your opinion?",
    "What's the background to that?",
    "What's the evidence that supports your view?",
    "What's the explanation for that?",
)

MULTI_REGION_SLOT = "[<region1>, <region2>, ...]"

DETECTION_PROMPT = (
    "In the conversation below, you simply answer the category name based on what you see in the imagery "
    "inside a particular region. I will give you only one region each time. Categories containing {categories}"
)

REFEXP_PROMPT = (
    "I will provide you with only one region containing only one object, although there may be other objects "
    "present in the image. It is recommended that you describe the object's relative position with respect to "
    "other objects in the image and its basic attributes."
)

CHOICE_PREAMBLE = "refers to specific areas within the photo along with their respective identifiers."
QA_PROMPT = (
    "I need you to answer the question. Questions are multiple-choice; you only need to pick the correct "
    "answer from the given options (A), (B), (C), or (D)."
)
QAR_PROMPT = (
    "I give you a question and its answer, I need you to provide a rationale explaining why the answer is "
    "right. Both questions are multiple-choice; you only need to pick the correct answer from the given "
    "options (A), (B), (C), or (D)."
)
RATIONALE_QUESTION = "What's the rationale for this decision?"

MAY_FEATURE = "<region{i}> may feature a {class_name}"

VCR_DECLARATION = "There are {regions} in the image."


@dataclass(frozen=True)
class TemplateBank:
    name: str
    entries: tuple[str, ...]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, k):
        return self.entries[k]


SINGLE_BANK = TemplateBank("single-region-caption", SINGLE_REGION_CAPTION)
MULTI_BANK = TemplateBank("multi-region-caption", MULTI_REGION_CAPTION)
VCR_BANK = TemplateBank("vcr-follow-up", VCR_FOLLOW_UP)

EXPECTED_BANK_SIZES = {SINGLE_BANK.name: 20, MULTI_BANK.name: 20, VCR_BANK.name: 30}


def fill_single(template: str, i: int) -> str:
    return template.replace("<region1>", f"<region{i}>")


def fill_multi(template: str, indices) -> str:
    return template.replace(MULTI_REGION_SLOT, ", ".join(f"<region{i}>" for i in indices))
