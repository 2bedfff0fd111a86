# Dual Mean-Teacher domain package
