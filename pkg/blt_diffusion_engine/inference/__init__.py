# Inference package initialization