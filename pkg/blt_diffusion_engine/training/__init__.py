# Training package initialization