"""Concrete iterative-convergent programs: lasso, lda, mlr."""
