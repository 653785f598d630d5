"""
invmark Services Package
Business Logic Layer: audio IO, spectral transform, codec, attacks, training, watermarking, evaluation
"""
