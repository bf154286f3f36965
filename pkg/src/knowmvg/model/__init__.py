from .grounding import GroundingOutput, KnowMVG, ModelOutput

__all__ = ["GroundingOutput", "KnowMVG", "ModelOutput"]
