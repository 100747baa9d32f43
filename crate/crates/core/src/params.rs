//! Named parameter trees.
//!
//! Parameter structs are generic over their slot type: `Tensor<T>` for stored
//! weights, [`Var`](crate::tensor::Var) once bound into a graph, and plain
//! tensors again for gradients. Visiting order is fixed and defines the order
//! of optimizer state and checkpoint entries.

macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            leaves: [$($leaf:ident),* $(,)?],
            lists: [$($list:ident : $inner:ident),* $(,)?] $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $leaf: P,)*
            $(pub $list: Vec<$inner<P>>,)*
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($list: self.$list.iter().map(|x| x.map(f)).collect(),)*
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $(f(format!("{prefix}.{}", stringify!($leaf)), &self.$leaf);)*
                $(
                    for (i, x) in self.$list.iter().enumerate() {
                        x.visit(&format!("{prefix}.{}.{i}", stringify!($list)), f);
                    }
                )*
            }

            /// Leaves in visiting order.
            pub fn leaves(&self) -> Vec<&P> {
                let mut out = Vec::new();
                self.collect_leaves(&mut out);
                out
            }

            pub fn leaves_mut(&mut self) -> Vec<&mut P> {
                let mut out = Vec::new();
                self.collect_leaves_mut(&mut out);
                out
            }

            pub(crate) fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a P>) {
                $(out.push(&self.$leaf);)*
                $(
                    for x in &self.$list {
                        x.collect_leaves(out);
                    }
                )*
            }

            pub(crate) fn collect_leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
                $(out.push(&mut self.$leaf);)*
                $(
                    for x in &mut self.$list {
                        x.collect_leaves_mut(out);
                    }
                )*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
                $(f(format!("{prefix}.{}", stringify!($leaf)), &mut self.$leaf);)*
                $(
                    for (i, x) in self.$list.iter_mut().enumerate() {
                        x.visit_mut(&format!("{prefix}.{}.{i}", stringify!($list)), f);
                    }
                )*
            }
        }
    };
}

pub(crate) use param_struct;
