# Analysis package initialization