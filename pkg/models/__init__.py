"""Encoder, segmenter, gripper detector, tokenizer and policy."""
